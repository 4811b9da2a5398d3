"""Parameter trees: dataclasses of Tensors, walked by name for checkpoints and optimisers."""
from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from .numerics import ConfigError, Tensor, get_default_dtype, parameter


def named_tensors(tree, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted.name, tensor)`` for every Tensor in a nested dataclass/list/dict."""
    if isinstance(tree, Tensor):
        yield prefix, tree
    elif dataclasses.is_dataclass(tree):
        for f in dataclasses.fields(tree):
            sub = prefix if f.metadata.get("inline") else _join(prefix, f.name)
            yield from named_tensors(getattr(tree, f.name), sub)
    elif isinstance(tree, dict):
        for key, val in tree.items():
            yield from named_tensors(val, _join(prefix, str(key)))
    elif isinstance(tree, (list, tuple)):
        for i, val in enumerate(tree):
            yield from named_tensors(val, _join(prefix, str(i)))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def count(tree) -> int:
    return sum(t.size for _, t in named_tensors(tree))


def assign(tree, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
    """Overwrite tensors in ``tree`` in place from a name -> array mapping."""
    seen = set()
    for name, t in named_tensors(tree):
        if name not in arrays:
            if strict:
                raise ConfigError(f"missing parameter {name}")
            continue
        arr = arrays[name]
        if arr.shape != t.shape:
            raise ConfigError(f"parameter {name}: shape {arr.shape} != expected {t.shape}")
        t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)
        seen.add(name)
    extra = set(arrays) - seen
    if strict and extra:
        raise ConfigError(f"unexpected parameters: {sorted(extra)[:5]}")


def uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape).astype(get_default_dtype()))


def zeros(shape) -> Tensor:
    return parameter(np.zeros(shape, dtype=get_default_dtype()))


def ones(shape) -> Tensor:
    return parameter(np.ones(shape, dtype=get_default_dtype()))


def full(shape, value: float) -> Tensor:
    return parameter(np.full(shape, value, dtype=get_default_dtype()))


def zero_like_tree(tree) -> None:
    """Set every tensor in the tree to zero (handy for analytic checks)."""
    for _, t in named_tensors(tree):
        t.data = np.zeros_like(t.data)


def parameter_from(arr) -> Tensor:
    return parameter(np.asarray(arr, dtype=get_default_dtype()))


INLINE = {"inline": True}


@dataclasses.dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, cin: int, cout: int, k: int, rng: np.random.Generator) -> "ConvParams":
        return cls(uniform(rng, (cout, cin, k, k), cin * k * k), zeros((cout,)))


@dataclasses.dataclass
class NormParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, c: int) -> "NormParams":
        return cls(ones((c,)), zeros((c,)))
