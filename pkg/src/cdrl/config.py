"""Training configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # schedule
    T: int = 6
    lambda_max: float = 9.8
    lambda_min: float = -5.1
    step_constant: float = 0.054
    sigma_tilde_variant: str = "next"
    # sampling inside training
    K: int = 15
    divergence_bound: float = 1e3
    # optimisation
    lr_ebm: float = 1e-4
    lr_init: float = 1e-5
    warmup_iters: int = 10000
    init_head_start: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    clip_norm: float = 0.0
    batch_size: int = 256
    total_iters: int = 20000
    # pairing / levels
    variance_reduction: bool = True
    literal_pairing: bool = False
    per_element_levels: bool = False
    ebm_level_weight: str = "none"
    # conditioning
    num_classes: int = 0
    p_uncond: float = 0.1
    # networks
    hidden: tuple[int, ...] = (128, 128, 128)
    init_hidden: tuple[int, ...] = (128, 128, 128)
    emb_dim: int = 32
    class_dim: int = 16
    activation: str = "swish"
    dtype: str = "float32"
    init_target: str = "y"
    init_learns_from: str = "refined"
    # data
    data: str = "checkerboard"
    data_path: str = ""
    data_dim: int = 2
    n_data: int = 50000
    data_seed: int = 0
    # run
    seed: int = 0
    log_every: int = 500

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.init_hidden = tuple(int(h) for h in self.init_hidden)
        self.validate()

    def validate(self):
        positive = ("T", "batch_size", "total_iters", "n_data", "emb_dim")
        for k in positive:
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive")
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        if self.lr_ebm < 0 or self.lr_init < 0 or self.warmup_iters < 0 or self.init_head_start < 0:
            raise ConfigError("learning rates and warmup counts must be non-negative")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ConfigError("p_uncond must lie in [0, 1]")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.init_target not in ("y", "x0", "eps"):
            raise ConfigError(f"init_target must be y, x0 or eps, got {self.init_target!r}")
        if self.ebm_level_weight not in ("none", "step"):
            raise ConfigError("ebm_level_weight must be 'none' or 'step'")
        if self.init_learns_from not in ("refined", "data"):
            raise ConfigError("init_learns_from must be 'refined' or 'data'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["init_hidden"] = list(self.init_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(cls, key: str, raw: str):
    """Convert a string value to the declared type of ``cls.key``."""
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    typ = types[key]
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ.startswith("tuple"):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {typ}") from None


def parse_kv(text: str, cls=TrainConfig) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(cls, key, value)
    return out


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        values = parse_kv(fh.read())
    values.update(overrides or {})
    return TrainConfig.from_dict(values)


def dump_kv(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(i) for i in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
