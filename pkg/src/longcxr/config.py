"""Model and training configuration objects.

Configs can be loaded from flat ``key=value`` files; command-line flags
override file values.
"""

from dataclasses import dataclass, field, fields, asdict
from pathlib import Path


VARIANTS = ("baseline", "plus_image", "plus_report", "simple_fusion", "full")


@dataclass
class ModelConfig:
    vocab_size: int = 0
    hidden: int = 512
    heads: int = 8
    enc_layers: int = 3
    dec_blocks: int = 3
    ff_dim: int = 2048
    feat_dim: int = 2048
    mem_slots: int = 3
    mem_heads: int = 8
    beta: float = 0.2
    dropout: float = 0.1
    max_len: int = 100
    image_size: int = 224
    text_positions: bool = True
    image_positions: bool = False

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0,1], got {self.beta}")
        if self.dec_blocks < 1 or self.enc_layers < 1:
            raise ValueError("layer counts must be >= 1")

    @property
    def n_patches(self):
        side = self.image_size // 32
        return side * side


@dataclass
class TrainConfig:
    epochs: int = 30
    lr_visual: float = 5e-5
    lr_other: float = 1e-4
    lr_decay: float = 0.8
    batch_size: int = 8
    seed: int = 0
    variant: str = "full"
    grad_clip: float = 5.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr_visual <= 0 or self.lr_other <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0,1], got {self.lr_decay}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(raw, target_type):
    if target_type is bool:
        try:
            return _BOOL_VALUES[raw.strip().lower()]
        except KeyError:
            raise ValueError(f"not a boolean: {raw!r}")
    if target_type is tuple:
        return tuple(float(x) for x in raw.split(","))
    return target_type(raw)


def parse_kv_file(path):
    """Read a flat key=value config file; '#' starts a comment line."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def config_from_kv(cls, kv, overrides=None):
    """Build a config dataclass from string key/value maps.

    ``overrides`` (e.g. CLI flags) win over ``kv`` (the file). Unknown keys
    raise so typos fail loudly.
    """
    merged = dict(kv)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(cls)}
    init = {}
    defaults = cls()
    for key, raw in merged.items():
        if key not in known:
            raise KeyError(f"unknown config key: {key}")
        target = type(getattr(defaults, key))
        init[key] = raw if isinstance(raw, target) else _coerce(str(raw), target)
    return cls(**{**asdict(defaults), **init})
