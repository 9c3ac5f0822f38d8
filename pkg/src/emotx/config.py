"""Run configuration and its flat ``key = value`` file format.

Lines are ``key = value``; ``#`` starts a comment. Values are coerced to the
type of the field default. Fractions such as ``tau = 1/3`` are accepted for
float fields, and ``drop_modality`` takes a comma-separated list.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

DATA_ROOT_ENV = "EMOTX_DATA_ROOT"
MODEL_KINDS = ("emotx", "emotx-1cls", "single-tx", "mlp")
CLS_MODES = ("per-emotion", "single")


@dataclass
class Config:
    # labels / token budget
    label_set: str = "top10"
    N: int = 4
    T: int = 300
    tau: float = 1 / 3
    T_star: float = 100.0
    fps: int = 3
    # feature and model dims
    D: int = 64
    D_V: int = 64
    D_C: int = 64
    D_U: int = 64
    layers: int = 2
    heads: int = 8
    ffn_mult: int = 4
    dropout: float = 0.1
    proj_bias: bool = True
    model: str = "emotx"
    cls_mode: str = "per-emotion"
    drop_modality: tuple[str, ...] = ()
    # optimisation
    lr: float = 5e-5
    batch_size: int = 8
    epochs: int = 50
    patience: int = 3
    min_delta: float = 1e-4
    seed: int = 0
    # synthetic data
    n_train: int = 256
    n_val: int = 64
    n_test: int = 64
    signal_strength: float = 1.0
    prevalence: float = 0.25
    # io
    data_root: str = field(default_factory=lambda: os.environ.get(DATA_ROOT_ENV, "data"))

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.model == "emotx-1cls":
            self.cls_mode = "single"
        if self.cls_mode not in CLS_MODES:
            raise ValueError(f"cls_mode must be one of {CLS_MODES}, got {self.cls_mode!r}")
        if isinstance(self.drop_modality, str):
            self.drop_modality = tuple(m for m in self.drop_modality.split(",") if m)
        self.drop_modality = tuple(self.drop_modality)

    @property
    def time_table_size(self) -> int:
        return math.ceil(self.T_star / self.tau - 1e-9) + 1

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.D_V, self.D_C, self.D_U

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drop_modality"] = list(self.drop_modality)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "drop_modality" in d:
            d["drop_modality"] = tuple(d["drop_modality"])
        return cls(**d)

    def updated(self, **changes) -> "Config":
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes)


def _coerce(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(Fraction(raw)) if "/" in raw else float(raw)
    if isinstance(default, tuple):
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    return raw


def parse_config_text(text: str, base: Config | None = None) -> Config:
    base = base or Config()
    defaults = {f.name: getattr(base, f.name) for f in fields(Config)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(raw, defaults[key])
    return replace(base, **values)


def load_config(path: str | Path | None, **overrides) -> Config:
    cfg = Config() if path is None else parse_config_text(Path(path).read_text())
    return cfg.updated(**overrides)
