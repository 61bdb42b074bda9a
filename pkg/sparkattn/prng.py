"""Counter-based random numbers: dropout masks and seeded workloads.

Dropout decisions are a stateless hash of ``(seed, batch, head, row, col)``
so any path can regenerate the mask of any tile in any order.  Workloads
come from numpy's ``Philox`` generator, one stream per tensor.
"""
import hashlib

import numpy as np

from .exceptions import InvalidValue

__all__ = [
    "dropout_uniform",
    "dropout_mask",
    "dropout_tile",
    "dropout_scale",
    "MaskLedger",
    "standard_normal",
    "generate_workload",
    "WORKLOAD_STREAMS",
]

_u64 = np.uint64
_GOLDEN = _u64(0x9E3779B97F4A7C15)
_MIX1 = _u64(0xBF58476D1CE4E5B9)
_MIX2 = _u64(0x94D049BB133111EB)
_TO_UNIT = 2.0**-53

WORKLOAD_STREAMS = ("q", "k", "v", "do")


def _mix(z):
    z = z ^ (z >> _u64(30))
    z = z * _MIX1
    z = z ^ (z >> _u64(27))
    z = z * _MIX2
    return z ^ (z >> _u64(31))


def _hash(seed, batch_idx, head_idx, row, col):
    words = [np.asarray(w, dtype=_u64) for w in (batch_idx, head_idx, row, col)]
    shape = np.broadcast_shapes(*(w.shape for w in words))
    with np.errstate(over="ignore"):
        x = _mix(np.full(shape, seed, dtype=_u64) ^ _GOLDEN)
        for word in words:
            x = _mix(x ^ (word + _GOLDEN))
    return x


def dropout_uniform(seed, batch_idx, head_idx, row, col):
    """Uniform draw in [0, 1) for each position; arguments broadcast.

    >>> u = dropout_uniform(7, 0, 1, np.arange(3)[:, None], np.arange(2))
    >>> u.shape, bool(((u >= 0) & (u < 1)).all())
    ((3, 2), True)
    >>> bool(dropout_uniform(7, 0, 1, 2, 1) == u[2, 1])
    True
    """
    return (_hash(seed, batch_idx, head_idx, row, col) >> _u64(11)).astype(np.float64) * _TO_UNIT


def dropout_mask(seed, batch_idx, head_idx, row, col, p):
    """True where the position is kept at drop probability ``p``.

    >>> bool(dropout_mask(3, 0, 0, 5, 9, 0.0))
    True
    """
    if not 0.0 <= p < 1.0:
        raise InvalidValue(f"dropout probability must be in [0, 1); got {p}")
    return dropout_uniform(seed, batch_idx, head_idx, row, col) >= p


def dropout_tile(seed, batch_idx, head_idx, row0, col0, rows, cols, p):
    """Keep mask of the ``rows x cols`` tile whose top-left element is ``(row0, col0)``."""
    if p == 0:
        return np.ones((rows, cols), dtype=bool)
    r = np.arange(row0, row0 + rows, dtype=_u64)[:, None]
    c = np.arange(col0, col0 + cols, dtype=_u64)[None, :]
    return dropout_mask(seed, batch_idx, head_idx, r, c, p)


def dropout_scale(p):
    """Inverted-dropout factor applied to kept weights."""
    return 1.0 / (1.0 - p)


class MaskLedger:
    """Keep masks consumed by a run, digested in position order.

    >>> a, b = MaskLedger(), MaskLedger()
    >>> t0, t1 = np.eye(2, dtype=bool), np.ones((2, 2), dtype=bool)
    >>> a.record(0, 0, 0, 0, t0); a.record(0, 0, 0, 2, t1)
    >>> b.record(0, 0, 0, 2, t1); b.record(0, 0, 0, 0, t0)
    >>> a.hexdigest() == b.hexdigest(), len(a)
    (True, 2)
    """

    def __init__(self):
        self._tiles = {}

    def __len__(self):
        return len(self._tiles)

    def record(self, batch_idx, head_idx, row0, col0, keep):
        self._tiles[(int(batch_idx), int(head_idx), int(row0), int(col0))] = np.asarray(
            keep, dtype=bool
        ).copy()

    def update(self, other):
        self._tiles.update(other._tiles)

    def hexdigest(self):
        h = hashlib.blake2b(digest_size=16)
        for key in sorted(self._tiles):
            keep = self._tiles[key]
            h.update(np.array(key + keep.shape, dtype="<u8").tobytes())
            h.update(np.packbits(keep).tobytes())
        return h.hexdigest()


def _generator(seed, stream):
    if not 0 <= seed < 2**64:
        raise InvalidValue(f"seed must fit in 64 unsigned bits; got {seed}")
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream,)))
    )


def standard_normal(shape, seed, stream=0):
    """Standard normal tensor rounded to binary16.

    >>> x = standard_normal((2, 3), seed=1)
    >>> x.dtype, bool((x == standard_normal((2, 3), seed=1)).all())
    (dtype('float16'), True)
    """
    return _generator(seed, stream).standard_normal(shape).astype(np.float16)


def generate_workload(shape, seed, names=WORKLOAD_STREAMS):
    """Independent binary16 tensors for ``names``, each on its own stream."""
    return {
        name: standard_normal(shape, seed, WORKLOAD_STREAMS.index(name)) for name in names
    }
