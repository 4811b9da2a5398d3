"""WKV aggregation kernels.

For a token sequence with keys ``k`` and values ``v`` (both T x d), decay
``w >= 0`` and bonus ``u`` (both length d), the causal form is::

    WKV_t = (sum_{i<t} e^{-(t-1-i) w + k_i} v_i + e^{u + k_t} v_t)
          / (sum_{i<t} e^{-(t-1-i) w + k_i}     + e^{u + k_t})

and the bidirectional form sums over every ``i != t`` with distance
``|t - i| - 1`` in the decay.  The recurrent kernels evaluate both in one
(causal) or two (bidirectional) linear sweeps, carrying the running sums as
``(a, b, p)``: the true sums are ``e^p * a`` and ``e^p * b``, with ``p`` the
largest exponent seen so far.  The naive kernels are direct double loops and
serve as the oracle.

Kernels compute in float64 and return the caller's dtype.  Every kernel
counts its arithmetic ops (add, sub, mul, div, exp, max) and reports them to
the active :func:`~crwkv.numerics.count_ops` context.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np

from .numerics import DimensionError, NumericError, Tensor, add_ops, as_tensor, record
from .numerics.tensor import counting

# op counts per token and channel, tallied line by line in the kernels below
OPS_OUTPUT = 12
OPS_UPDATE = 11
OPS_COMBINE = 19

if os.environ.get("CRWKV_THREADS", "").isdigit() and int(os.environ["CRWKV_THREADS"]) > 0:
    numba.set_num_threads(max(1, min(numba.config.NUMBA_NUM_THREADS, int(os.environ["CRWKV_THREADS"]))))


@numba.njit(cache=True)
def _causal_fwd(k, v, w, u, y):
    B, T, d = k.shape
    ops = 0
    for n in range(B):
        for c in range(d):
            a = 0.0
            b = 0.0
            p = -np.inf
            wc = w[c]
            uc = u[c]
            for t in range(T):
                kt = k[n, t, c]
                vt = v[n, t, c]
                ww = uc + kt
                q = max(p, ww)
                e1 = np.exp(p - q)
                e2 = np.exp(ww - q)
                y[n, t, c] = (e1 * a + e2 * vt) / (e1 * b + e2)
                ww = p - wc
                q = max(ww, kt)
                e1 = np.exp(ww - q)
                e2 = np.exp(kt - q)
                a = e1 * a + e2 * vt
                b = e1 * b + e2
                p = q
                ops += 23
    return ops


@numba.njit(cache=True)
def _sweep(k, v, w, n, c, step, sa, sb, sp):
    """Stabilised one-directional sweep storing the state *before* each token.

    ``step`` = +1 sweeps left to right (sums over i < t), -1 right to left.
    """
    T = k.shape[1]
    a = 0.0
    b = 0.0
    p = -np.inf
    wc = w[c]
    t = 0 if step == 1 else T - 1
    for _ in range(T):
        sa[t] = a
        sb[t] = b
        sp[t] = p
        kt = k[n, t, c]
        ww = p - wc
        q = max(ww, kt)
        e1 = np.exp(ww - q)
        e2 = np.exp(kt - q)
        a = e1 * a + e2 * v[n, t, c]
        b = e1 * b + e2
        p = q
        t += step
    return T * 11


@numba.njit(cache=True)
def _bi_fwd(k, v, w, u, y):
    B, T, d = k.shape
    fa = np.empty(T)
    fb = np.empty(T)
    fp = np.empty(T)
    ga = np.empty(T)
    gb = np.empty(T)
    gp = np.empty(T)
    ops = 0
    for n in range(B):
        for c in range(d):
            ops += _sweep(k, v, w, n, c, 1, fa, fb, fp)
            ops += _sweep(k, v, w, n, c, -1, ga, gb, gp)
            uc = u[c]
            for t in range(T):
                ww = uc + k[n, t, c]
                q = max(max(fp[t], gp[t]), ww)
                e1 = np.exp(fp[t] - q)
                e2 = np.exp(gp[t] - q)
                e3 = np.exp(ww - q)
                y[n, t, c] = (e1 * fa[t] + e2 * ga[t] + e3 * v[n, t, c]) / (e1 * fb[t] + e2 * gb[t] + e3)
                ops += 19
    return ops


@numba.njit(cache=True)
def _naive(k, v, w, u, y, bidirectional):
    B, T, d = k.shape
    z = np.empty(T)
    ops = 0
    for n in range(B):
        for c in range(d):
            for t in range(T):
                hi = T if bidirectional else t + 1
                m = -np.inf
                for i in range(hi):
                    if i == t:
                        z[i] = u[c] + k[n, t, c]
                        ops += 1
                    else:
                        dist = t - i if i < t else i - t
                        z[i] = -(dist - 1) * w[c] + k[n, i, c]
                        ops += 2
                    m = max(m, z[i])
                    ops += 1
                num = 0.0
                den = 0.0
                for i in range(hi):
                    e = np.exp(z[i] - m)
                    num += e * v[n, i, c]
                    den += e
                    ops += 5
                y[n, t, c] = num / den
                ops += 1
    return ops


@numba.njit(cache=True)
def _dist_sweep(k, v, w, n, c, step, sa, sb, san, sbn, sp):
    """Like ``_sweep`` but also carries distance-weighted sums (for dL/dw).

    If A_t = sum_i r^{D(t,i)} x_i then At_t = sum_i D(t,i) r^{D(t,i)} x_i obeys
    At_{t+1} = r * (At_t + A_t); both share the scale e^p.
    """
    T = k.shape[1]
    a = 0.0
    b = 0.0
    an = 0.0
    bn = 0.0
    p = -np.inf
    wc = w[c]
    t = 0 if step == 1 else T - 1
    for _ in range(T):
        sa[t] = a
        sb[t] = b
        san[t] = an
        sbn[t] = bn
        sp[t] = p
        kt = k[n, t, c]
        ww = p - wc
        q = max(ww, kt)
        e1 = np.exp(ww - q)
        e2 = np.exp(kt - q)
        an = e1 * (an + a)
        bn = e1 * (bn + b)
        a = e1 * a + e2 * v[n, t, c]
        b = e1 * b + e2
        p = q
        t += step


@numba.njit(cache=True)
def _transpose_sweep(k, v, w, n, c, step, P, h, y, dk, dv):
    """Add sum_{t beyond i} e^{-(|t-i|-1) w + k_i - P_t} h_t terms to dv_i and dk_i.

    ``step`` = -1 collects outputs t > i (walking right to left), +1 outputs t < i.
    """
    T = k.shape[1]
    rho = 0.0
    sig = 0.0
    r = -np.inf
    wc = w[c]
    i = T - 1 if step == -1 else 0
    for _ in range(T):
        kv = k[n, i, c]
        s = np.exp(kv + r)
        dv[n, i, c] += s * rho
        dk[n, i, c] += s * (v[n, i, c] * rho - sig)
        ww = r - wc
        q = max(ww, -P[i])
        e1 = np.exp(ww - q)
        e2 = np.exp(-P[i] - q)
        rho = e1 * rho + e2 * h[i]
        sig = e1 * sig + e2 * h[i] * y[i]
        r = q
        i += step


@numba.njit(cache=True)
def _backward(k, v, w, u, g, bidirectional, dk, dv, dw, du):
    B, T, d = k.shape
    fa = np.empty(T)
    fb = np.empty(T)
    fan = np.empty(T)
    fbn = np.empty(T)
    fp = np.empty(T)
    ga = np.zeros(T)
    gb = np.zeros(T)
    gan = np.zeros(T)
    gbn = np.zeros(T)
    gp = np.full(T, -np.inf)
    P = np.empty(T)
    h = np.empty(T)
    y = np.empty(T)
    for n in range(B):
        for c in range(d):
            _dist_sweep(k, v, w, n, c, 1, fa, fb, fan, fbn, fp)
            if bidirectional:
                _dist_sweep(k, v, w, n, c, -1, ga, gb, gan, gbn, gp)
            uc = u[c]
            for t in range(T):
                kt = k[n, t, c]
                vt = v[n, t, c]
                zb = uc + kt
                q = max(max(fp[t], gp[t]), zb)
                e1 = np.exp(fp[t] - q)
                e2 = np.exp(gp[t] - q)
                e3 = np.exp(zb - q)
                den = e1 * fb[t] + e2 * gb[t] + e3
                yt = (e1 * fa[t] + e2 * ga[t] + e3 * vt) / den
                ht = g[n, t, c] / den
                P[t] = q
                h[t] = ht
                y[t] = yt
                bonus = e3 * ht
                du[c] += bonus * (vt - yt)
                dv[n, t, c] += bonus
                dk[n, t, c] += bonus * (vt - yt)
                dw[c] -= ht * (e1 * (fan[t] - yt * fbn[t]) + e2 * (gan[t] - yt * gbn[t]))
            _transpose_sweep(k, v, w, n, c, -1, P, h, y, dk, dv)
            if bidirectional:
                _transpose_sweep(k, v, w, n, c, 1, P, h, y, dk, dv)


@dataclass
class WkvParams:
    """Per-channel decay (stored raw; applied as ``exp(w_raw)``) and bonus."""

    w_raw: Tensor
    u: Tensor

    def decay(self) -> Tensor:
        from .numerics import exp
        return exp(self.w_raw)


def _prepare(k, v, w, u):
    k = np.asarray(k.data if isinstance(k, Tensor) else k)
    v = np.asarray(v.data if isinstance(v, Tensor) else v)
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64).reshape(-1)
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64).reshape(-1)
    if k.shape != v.shape:
        raise DimensionError(f"k {k.shape} and v {v.shape} differ")
    if k.ndim not in (2, 3):
        raise DimensionError(f"expected T x d or B x T x d, got {k.shape}")
    if k.shape[-2] == 0:
        raise DimensionError("empty sequence (T = 0)")
    d = k.shape[-1]
    if w.shape != (d,) or u.shape != (d,):
        raise DimensionError(f"w and u must have length {d}")
    if not (np.all(np.isfinite(k)) and np.all(np.isfinite(v))):
        raise NumericError("non-finite k or v")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(u))):
        raise NumericError("non-finite w or u")
    dtype = k.dtype if k.dtype in (np.float32, np.float64) else np.float64
    k3 = np.ascontiguousarray(k.reshape(-1, *k.shape[-2:]), dtype=np.float64)
    v3 = np.ascontiguousarray(v.reshape(-1, *v.shape[-2:]), dtype=np.float64)
    return k3, v3, w, u, k.shape, dtype


def _run(kernel, k, v, w, u, *extra, kind: str):
    k3, v3, w64, u64, shape, dtype = _prepare(k, v, w, u)
    y = np.empty_like(k3)
    ops = kernel(k3, v3, w64, u64, y, *extra)
    if counting():
        add_ops(kind, ops)
    return y.reshape(shape).astype(dtype, copy=False), int(ops)


def wkv_naive(k, v, w, u) -> np.ndarray:
    """Causal WKV by direct double loop with per-output max subtraction."""
    return _run(_naive, k, v, w, u, False, kind="wkv_naive")[0]


def wkv_bidirectional_naive(k, v, w, u) -> np.ndarray:
    """Bidirectional WKV by direct double loop."""
    return _run(_naive, k, v, w, u, True, kind="wkv_naive")[0]


def wkv_recurrent(k, v, w, u) -> np.ndarray:
    """Causal WKV in one stabilised sweep: Theta(T d) work, O(d) state."""
    return _run(_causal_fwd, k, v, w, u, kind="wkv_recurrent")[0]


def wkv_bidirectional(k, v, w, u) -> np.ndarray:
    """Bidirectional WKV as a forward sweep, a backward sweep and the bonus term."""
    return _run(_bi_fwd, k, v, w, u, kind="wkv_bidirectional")[0]


KERNELS = {
    "wkv-recurrent": _causal_fwd,
    "wkv-bidirectional": _bi_fwd,
}


def kernel_ops(name: str, k, v, w, u) -> tuple[np.ndarray, int]:
    """Run a kernel by bench name and return (output, counted ops)."""
    if name == "wkv-naive":
        return _run(_naive, k, v, w, u, False, kind="wkv_naive")
    if name == "wkv-bidirectional-naive":
        return _run(_naive, k, v, w, u, True, kind="wkv_naive")
    try:
        kernel = KERNELS[name]
    except KeyError:
        raise ValueError(f"unknown kernel {name!r}") from None
    return _run(kernel, k, v, w, u, kind=name.replace("-", "_"))


def wkv_backward(k, v, w, u, grad, bidirectional: bool = True):
    """Exact gradients (dk, dv, dw, du) of ``sum(grad * WKV(k, v, w, u))``.

    The forward sums are recomputed rather than stored.
    """
    k3, v3, w64, u64, shape, dtype = _prepare(k, v, w, u)
    g = np.asarray(grad.data if isinstance(grad, Tensor) else grad)
    if g.shape != shape:
        raise DimensionError(f"upstream grad {g.shape} does not match {shape}")
    g3 = np.ascontiguousarray(g.reshape(k3.shape), dtype=np.float64)
    dk = np.zeros_like(k3)
    dv = np.zeros_like(k3)
    dw = np.zeros(w64.shape)
    du = np.zeros(u64.shape)
    _backward(k3, v3, w64, u64, g3, bidirectional, dk, dv, dw, du)
    wdt = w.dtype if isinstance(w, (np.ndarray, Tensor)) else dtype
    udt = u.dtype if isinstance(u, (np.ndarray, Tensor)) else dtype
    return (dk.reshape(shape).astype(dtype, copy=False), dv.reshape(shape).astype(dtype, copy=False),
            dw.astype(wdt, copy=False), du.astype(udt, copy=False))


def wkv(k, v, w, u, bidirectional: bool = True) -> Tensor:
    """Tape-aware WKV over the last two axes (..., T, d); one node on the tape."""
    k, v, w, u = as_tensor(k), as_tensor(v), as_tensor(w), as_tensor(u)
    fwd = _bi_fwd if bidirectional else _causal_fwd
    out, _ = _run(fwd, k, v, w, u, kind="wkv_bidirectional" if bidirectional else "wkv_recurrent")

    def bw(g):
        return wkv_backward(k, v, w, u, g, bidirectional)

    return record("wkv", out, (k, v, w, u), bw)


@dataclass
class WkvState:
    """Streaming causal state: the past sums are ``e^p * a`` (values) and ``e^p * b`` (weights)."""

    a: np.ndarray
    b: np.ndarray
    p: np.ndarray

    @classmethod
    def empty(cls, d: int) -> "WkvState":
        return cls(np.zeros(d), np.zeros(d), np.full(d, -np.inf))

    def output(self, k_t, v_t, u) -> np.ndarray:
        zb = np.asarray(u, dtype=np.float64) + k_t
        q = np.maximum(self.p, zb)
        e1 = np.exp(self.p - q)
        e2 = np.exp(zb - q)
        return (e1 * self.a + e2 * v_t) / (e1 * self.b + e2)

    def update(self, k_t, v_t, w) -> "WkvState":
        ww = self.p - np.asarray(w, dtype=np.float64)
        q = np.maximum(ww, k_t)
        e1 = np.exp(ww - q)
        e2 = np.exp(k_t - q)
        return WkvState(e1 * self.a + e2 * v_t, e1 * self.b + e2, q)

    def shifted(self, c: float) -> "WkvState":
        """Same sums, different scale: ``a e^c`` and ``p - c``."""
        return WkvState(self.a * np.exp(c), self.b * np.exp(c), self.p - c)


def wkv_stream(k, v, w, u):
    """Token-at-a-time causal WKV (RNN mode); yields one output row per token."""
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    state = WkvState.empty(k.shape[-1])
    for kt, vt in zip(k, v):
        yield state.output(kt, vt, u)
        state = state.update(kt, vt, w)
