"""PNG image/mask files and on-disk dataset directories."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..numerics import DimensionError, ValidationError
from .synth import ChangeSample

SUBDIRS = ("A", "B", "label")


def read_rgb(path) -> np.ndarray:
    """3 x H x W float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise ValidationError(f"cannot read image {path}: {exc}") from None
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_mask(path) -> np.ndarray:
    """H x W uint8 in {0, 1}; any grey level above 127 counts as change."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, UnidentifiedImageError) as exc:
        raise ValidationError(f"cannot read mask {path}: {exc}") from None
    return (arr > 127).astype(np.uint8)


def to_uint8_rgb(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)


def write_rgb(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8_rgb(img), "RGB").save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, "L").save(path)


def save_dataset(root, samples: list[ChangeSample], meta: dict | None = None) -> Path:
    root = Path(root)
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        name = f"{s.index:05d}.png"
        write_rgb(root / "A" / name, s.A)
        write_rgb(root / "B" / name, s.B)
        write_mask(root / "label" / name, s.M)
    if meta:
        (root / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return root


def load_dataset(root) -> list[ChangeSample]:
    """Read ``A/``, ``B/`` and ``label/`` PNGs that share file names."""
    root = Path(root)
    if not all((root / sub).is_dir() for sub in SUBDIRS):
        raise ValidationError(f"{root} must contain A/, B/ and label/ directories")
    names = sorted(p.name for p in (root / "A").glob("*.png"))
    if not names:
        raise ValidationError(f"no PNG files in {root / 'A'}")
    out = []
    for i, name in enumerate(names):
        A = read_rgb(root / "A" / name)
        B = read_rgb(root / "B" / name)
        M = read_mask(root / "label" / name)
        if A.shape != B.shape or A.shape[1:] != M.shape:
            raise DimensionError(f"{name}: A, B and label differ in size")
        out.append(ChangeSample(A, B, M, seed=-1, index=i))
    return out
