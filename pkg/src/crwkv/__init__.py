"""ChangeRWKV: bi-temporal change detection built on linear-time WKV kernels."""
import os

__version__ = "0.1.0"

# CRWKV_THREADS caps BLAS/OpenMP pools; it only takes effect if set before numpy loads.
if os.environ.get("CRWKV_THREADS", "").isdigit() and int(os.environ["CRWKV_THREADS"]) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["CRWKV_THREADS"])
