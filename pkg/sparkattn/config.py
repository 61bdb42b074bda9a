"""Attention run configuration."""
import dataclasses
import math
import os

from .exceptions import InvalidValue
from .half import AccMode
from .mma import ENGINES

SEED_ENV = "SPARKATTN_SEED"
DEFAULT_TILE = 64


def default_seed():
    """Seed from ``$SPARKATTN_SEED``, or 0."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return 0
    try:
        seed = int(raw, 0)
    except ValueError:
        raise InvalidValue(f"{SEED_ENV} must be an integer; got {raw!r}") from None
    _check_seed(seed)
    return seed


def _check_seed(seed):
    if not 0 <= seed < 2**64:
        raise InvalidValue(f"seed must fit in 64 unsigned bits; got {seed}")


@dataclasses.dataclass(frozen=True)
class AttnConfig:
    """Shape, tiling and numerics of one attention run.

    Tile sizes default to ``min(64, seq_len)``.

    >>> cfg = AttnConfig(seq_len=128, head_dim=64)
    >>> cfg.tile_rows, cfg.q_tiles, round(cfg.scale, 4)
    (64, 2, 0.125)
    >>> AttnConfig(seq_len=100, head_dim=64)
    Traceback (most recent call last):
    ...
    sparkattn.exceptions.InvalidValue: seq_len 100 must be a multiple of tile_rows 64
    """

    batch: int = 1
    heads: int = 1
    seq_len: int = 64
    head_dim: int = 64
    tile_rows: int = None
    tile_cols: int = None
    causal: bool = False
    dropout_p: float = 0.0
    seed: int = 0
    acc_mode: AccMode = AccMode.FP32_ACC
    softmax_scale: float = None
    engine: str = "vector"
    warps: int = 4
    workers: int = 1

    def __post_init__(self):
        def set_(name, value):
            object.__setattr__(self, name, value)

        set_("acc_mode", AccMode.parse(self.acc_mode))
        for name in ("batch", "heads", "seq_len", "head_dim", "warps", "workers"):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise InvalidValue(f"{name} must be a positive integer; got {value!r}")
        if self.tile_rows is None:
            set_("tile_rows", min(DEFAULT_TILE, self.seq_len))
        if self.tile_cols is None:
            set_("tile_cols", min(DEFAULT_TILE, self.seq_len))
        for name in ("tile_rows", "tile_cols"):
            value = getattr(self, name)
            if value <= 0 or value % 8:
                raise InvalidValue(f"{name} must be a positive multiple of 8; got {value}")
            if self.seq_len % value:
                raise InvalidValue(f"seq_len {self.seq_len} must be a multiple of {name} {value}")
        if self.head_dim % 4:
            raise InvalidValue(f"head_dim must be a multiple of 4; got {self.head_dim}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise InvalidValue(f"dropout_p must be in [0, 1); got {self.dropout_p}")
        _check_seed(self.seed)
        if self.engine not in ENGINES:
            raise InvalidValue(f"engine must be one of {ENGINES}; got {self.engine!r}")
        if self.softmax_scale is not None and not (
            math.isfinite(self.softmax_scale) and self.softmax_scale > 0
        ):
            raise InvalidValue(f"softmax_scale must be positive; got {self.softmax_scale}")

    @property
    def scale(self):
        if self.softmax_scale is None:
            return 1.0 / math.sqrt(self.head_dim)
        return float(self.softmax_scale)

    @property
    def shape(self):
        return (self.batch, self.heads, self.seq_len, self.head_dim)

    @property
    def q_tiles(self):
        return self.seq_len // self.tile_rows

    @property
    def k_tiles(self):
        return self.seq_len // self.tile_cols

    def replace(self, **changes):
        """Validated copy with ``changes`` applied."""
        return dataclasses.replace(self, **changes)

    def as_dict(self):
        d = dataclasses.asdict(self)
        d["acc_mode"] = self.acc_mode.value
        d["softmax_scale"] = self.scale
        return d
