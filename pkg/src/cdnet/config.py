"""Training configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .data import ConfigError

VARIANTS = ("cdnet", "rcore", "rgid", "meanpool")


@dataclass
class TrainConfig:
    d: int = 32
    k: int = 16
    n: int = 5
    H: int = 2
    heads: int = 2
    L_max: int = 50
    N_f: int = 5
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 5
    seed: int = 0
    variant: str = "cdnet"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_decay: float = 1.0
    patience: int = 2
    ffn_mult: int = 2
    head_hidden: tuple[int, ...] = field(default=(128, 64))
    neg_ratio: int = 1
    precision: str = "float32"

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: unknown value {self.variant!r} (expected one of {', '.join(VARIANTS)})")
        if self.k < 1 or self.k > self.L_max:
            raise ConfigError(f"k: need 1 <= k <= L_max, got k={self.k}, L_max={self.L_max}")
        if self.n < 1:
            raise ConfigError(f"n: must be >= 1, got {self.n}")
        if self.d % self.heads:
            raise ConfigError(f"heads: d={self.d} is not divisible by heads={self.heads}")
        for name in ("d", "H", "heads", "N_f", "batch_size", "epochs", "ffn_mult", "neg_ratio"):
            if getattr(self, name) < (0 if name == "H" else 1):
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        if self.lr < 0:
            raise ConfigError(f"lr: must be >= 0, got {self.lr}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision: expected float32 or float64, got {self.precision!r}")
        return self

    @property
    def tokens(self) -> int:
        """Token count of the interaction stack for this variant."""
        return {"cdnet": self.k + 1, "rcore": 1, "rgid": self.k, "meanpool": 1}[self.variant] + self.N_f

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return apply_overrides(cls(), d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()


def _coerce(name: str, ftype, raw):
    try:
        if ftype in (int, "int"):
            return int(raw)
        if ftype in (float, "float"):
            return float(raw)
        if name == "head_hidden":
            if isinstance(raw, str):
                raw = [p for p in raw.replace(",", " ").split() if p]
            return tuple(int(v) for v in raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot parse value {raw!r}") from None


def apply_overrides(cfg: TrainConfig, values: dict) -> TrainConfig:
    known = {f.name: f.type for f in fields(TrainConfig)}
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"{key}: unknown config key")
        changes[key] = _coerce(key, known[key], raw)
    return dataclasses.replace(cfg, **changes).validate()


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return apply_overrides(TrainConfig(), parse_config_text(fh.read()))


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {' '.join(map(str, v)) if isinstance(v, list) else v}")
    return "\n".join(lines) + "\n"
