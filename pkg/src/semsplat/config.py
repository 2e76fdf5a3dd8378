"""Plain-text ``key=value`` run configurations.

Keys are the constructor parameters of :class:`GaussianFeatureSLAM`; values
are coerced to the type of the parameter's default. ``#`` starts a comment.
"""

from __future__ import annotations

import inspect
from pathlib import Path

from .estimator import GaussianFeatureSLAM


class ConfigError(ValueError):
    pass


def defaults() -> dict:
    sig = inspect.signature(GaussianFeatureSLAM.__init__)
    return {k: p.default for k, p in sig.parameters.items() if k != "self"}


# Tuned for the synthetic rooms produced by ``semsplat generate`` (80x60
# images, scene units of metres): denser back-projection, a correspondence
# gate wide enough for the per-frame motion, and a mean learning rate small
# enough that optimisation does not drag geometry away from the tracked surface.
SYNTHETIC_PRESET = {
    "stride": 2,
    "corr_distance": 0.3,
    "lr_means": 1e-4,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if default is None:
            return None if raw.lower() in ("none", "") else float(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as "
                          f"{'bool' if isinstance(default, bool) else type(default).__name__}") from None


def parse_config(text: str, source: str = "<config>") -> dict:
    known = defaults()
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, value, known[key])
    return out


def load_config(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file {p} does not exist") from None
    return parse_config(text, str(p))


def format_config(params: dict) -> str:
    return "".join(f"{k}={'none' if v is None else v}\n" for k, v in params.items())
