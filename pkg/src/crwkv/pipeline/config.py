"""Plain ``key=value`` config files for the model and the training run."""
from __future__ import annotations

import dataclasses
from pathlib import Path

from ..encoder import VARIANTS, ModelConfig
from ..numerics import ConfigError

MODEL_KEYS = ("variant", "dims", "depths", "in_channels", "channel_mix", "fusion", "spatial_fusion")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv(text: str) -> dict[str, str]:
    """``key=value`` per line; ``#`` starts a comment; later keys win."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    return parse_kv("\n".join(items or []))


def read_kv(path: str | Path) -> dict[str, str]:
    try:
        return parse_kv(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def format_kv(values: dict) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in values.items())


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def to_bool(s: str) -> bool:
    s = s.lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def to_ints(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in s.replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {s!r}") from None


def model_config(values: dict[str, str]) -> ModelConfig:
    kw: dict = {}
    if "dims" in values:
        kw["dims"] = to_ints(values["dims"])
    if "depths" in values:
        kw["depths"] = to_ints(values["depths"])
    if "in_channels" in values:
        kw["in_channels"] = int(values["in_channels"])
    for key in ("channel_mix", "fusion"):
        if key in values:
            kw[key] = values[key]
    if "spatial_fusion" in values:
        kw["spatial_fusion"] = to_bool(values["spatial_fusion"])
    variant = values.get("variant", "T")
    if variant in VARIANTS:
        return ModelConfig.from_variant(variant, **kw)
    if "dims" not in kw or "depths" not in kw:
        raise ConfigError(f"unknown variant {variant!r} needs explicit dims and depths")
    return ModelConfig(variant=variant, **kw)


def model_values(cfg: ModelConfig) -> dict:
    return {k: getattr(cfg, k) for k in MODEL_KEYS}


def fill_dataclass(cls, values: dict[str, str], base=None):
    """Build ``cls`` from string values, converting by each field's default type."""
    base = base or cls()
    changes = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        current = getattr(base, f.name)
        raw = values[f.name]
        try:
            if isinstance(current, bool):
                changes[f.name] = to_bool(raw)
            elif isinstance(current, int):
                changes[f.name] = int(raw)
            elif isinstance(current, float):
                changes[f.name] = float(raw)
            elif current is None:
                changes[f.name] = None if raw.lower() in ("", "none") else int(raw)
            else:
                changes[f.name] = raw
        except ValueError:
            raise ConfigError(f"bad value for {f.name}: {raw!r}") from None
    return dataclasses.replace(base, **changes)
