"""Flat ``key = value`` run configuration with dotted namespaces.

    # comment
    grid.n = 2
    grid.N = 32
    dual.delta_list = 0.1, 0.01, 0.001
    physics.phi.kind = random

Values are parsed as bool, int, float, comma lists of those, or left as
strings.  Later keys override earlier ones.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


def _scalar(tok: str):
    t = tok.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("inf", "+inf", "infinity"):
        return float("inf")
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        return t


def parse_value(text: str):
    if "," in text:
        return [_scalar(x) for x in text.split(",") if x.strip()]
    return _scalar(text)


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    source: str = "<string>"

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def require(self, key: str):
        if key not in self.values:
            raise ConfigError(f"{self.source}: missing required key {key!r}")
        return self.values[key]

    def float(self, key: str, default=None) -> float:
        v = self.values.get(key, default)
        if v is None:
            raise ConfigError(f"{self.source}: missing required key {key!r}")
        try:
            return float(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{self.source}: {key} = {v!r} is not a number") from None

    def int(self, key: str, default=None) -> int:
        v = self.values.get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
            if v is None:
                raise ConfigError(f"{self.source}: missing required key {key!r}")
            raise ConfigError(f"{self.source}: {key} = {v!r} is not an integer")
        return int(v)

    def list(self, key: str, default=None) -> list:
        v = self.values.get(key, default)
        if v is None:
            raise ConfigError(f"{self.source}: missing required key {key!r}")
        return list(v) if isinstance(v, (list, tuple)) else [v]

    def section(self, prefix: str) -> dict:
        """Keys under ``prefix.`` with the prefix stripped."""
        p = prefix.rstrip(".") + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    @property
    def seed(self) -> int | None:
        s = self.values.get("seed")
        return None if s is None else int(s)

    def descriptor(self, prefix: str, default: dict | None = None) -> dict:
        """Field descriptor from ``prefix.kind``, ``prefix.seed`` ... keys.

        A random descriptor without its own seed gets one derived from the run
        seed and the prefix, so distinct fields stay independent.
        """
        d = self.section(prefix) or dict(default or {})
        if not d:
            raise ConfigError(f"{self.source}: no field descriptor under {prefix!r}")
        if d.get("kind") == "random" and "seed" not in d:
            if self.seed is None:
                raise ConfigError(f"{self.source}: random field {prefix!r} needs 'seed' or a run seed")
            d["seed"] = self.derived_seed(prefix)
        for k in ("k", "center"):
            if k in d and not isinstance(d[k], list):
                d[k] = [d[k]]
        return d

    def derived_seed(self, tag: str) -> int:
        ss = np.random.SeedSequence([int(self.seed or 0), zlib.crc32(tag.encode())])
        return int(ss.generate_state(1)[0])

    def with_overrides(self, **kw) -> RunConfig:
        vals = dict(self.values)
        vals.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig(vals, self.source)

    def resolved(self) -> dict:
        return dict(sorted(self.values.items()))


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    vals = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key or any(c.isspace() for c in key):
            raise ConfigError(f"{source}:{lineno}: bad key {key!r}")
        vals[key] = parse_value(val)
    return RunConfig(vals, source)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))
