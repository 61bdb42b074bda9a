"""Streaming row-wise softmax with running maximum and running exponential sum.

For a row seen in blocks, ``m`` is the largest element so far and ``l`` the
sum of ``exp(x - m)`` over everything seen.  When a new block raises the
maximum, earlier partial results are rescaled by ``exp(m_old - m_new)``.
All arithmetic here is binary32.
"""
import dataclasses

import numpy as np

from .exceptions import DimensionMismatch, FullyMaskedRow, InvalidValue, NumericalFault

__all__ = [
    "SoftmaxState",
    "state_init",
    "block_update",
    "merge",
    "finalize",
    "softmax_blocks",
]

_f32 = np.float32


@dataclasses.dataclass
class SoftmaxState:
    """Per-row running maximum ``m`` and running exponential sum ``l``."""

    m: np.ndarray
    l: np.ndarray  # noqa: E741

    @property
    def rows(self):
        return self.m.shape[0]

    def copy(self):
        return SoftmaxState(self.m.copy(), self.l.copy())


def state_init(rows):
    """Empty state for ``rows`` rows.

    >>> s = state_init(2)
    >>> s.m.tolist(), s.l.tolist()
    ([-inf, -inf], [0.0, 0.0])
    """
    if rows <= 0:
        raise InvalidValue(f"softmax state needs at least one row; got {rows}")
    return SoftmaxState(np.full(rows, -np.inf, dtype=_f32), np.zeros(rows, dtype=_f32))


def _shift(m):
    # rows that have seen only masked entries subtract nothing
    return np.where(np.isneginf(m), _f32(0), m).astype(_f32)


def block_update(state, s_block):
    """Fold a block of scaled scores into ``state`` (in place).

    Masked entries are ``-inf``.  Returns the unnormalized weights
    ``exp(s - m_new)`` and the per-row factor ``exp(m_old - m_new)`` that
    anything accumulated against the old maximum must be multiplied by.

    >>> st = state_init(1)
    >>> p, rescale = block_update(st, np.array([[0.0, np.log(3.0)]]))
    >>> [round(float(x), 6) for x in p[0]], round(float(st.l[0]), 6)
    ([0.333333, 1.0], 1.333333)
    """
    s = np.asarray(s_block, dtype=_f32)
    if s.ndim != 2 or s.shape[0] != state.rows or s.shape[1] == 0:
        raise DimensionMismatch(
            f"score block must be shaped ({state.rows}, cols>0); got {s.shape}"
        )
    if np.isnan(s).any() or np.isposinf(s).any():
        bad = sorted(set(np.nonzero(np.isnan(s) | np.isposinf(s))[0].tolist()))
        raise NumericalFault(f"non-finite scores reached softmax in rows {bad[:8]}")
    m_old = state.m
    m_new = np.maximum(m_old, s.max(axis=1))
    shift = _shift(m_new)
    p = np.exp(s - shift[:, None])
    rescale = np.exp(m_old - shift)
    state.l = (rescale * state.l + p.sum(axis=1, dtype=_f32)).astype(_f32)
    state.m = m_new.astype(_f32)
    return p, rescale


def merge(a, b):
    """Combine states computed over disjoint parts of the same rows.

    >>> x = state_init(1)
    >>> _ = block_update(x, np.array([[1.0, 2.0]]))
    >>> merged = merge(x, state_init(1))
    >>> bool(merged.m[0] == x.m[0] and merged.l[0] == x.l[0])
    True
    """
    if a.rows != b.rows:
        raise DimensionMismatch(f"cannot merge states with {a.rows} and {b.rows} rows")
    m = np.maximum(a.m, b.m)
    shift = _shift(m)
    l = np.exp(a.m - shift) * a.l + np.exp(b.m - shift) * b.l  # noqa: E741
    return SoftmaxState(m.astype(_f32), l.astype(_f32))


def finalize(state):
    """Return ``(1/l, m + ln l)`` per row.

    >>> st = state_init(1)
    >>> _ = block_update(st, np.zeros((1, 4)))
    >>> inv_l, lse = finalize(st)
    >>> float(inv_l[0]), round(float(lse[0]), 6)
    (0.25, 1.386294)
    """
    empty = np.nonzero(~(state.l > 0))[0]
    if empty.size:
        raise FullyMaskedRow(f"rows {empty[:8].tolist()} have no unmasked element")
    inv_l = (_f32(1) / state.l).astype(_f32)
    lse = (state.m + np.log(state.l)).astype(_f32)
    return inv_l, lse


def softmax_blocks(s, bounds):
    """Normalized softmax of rows ``s`` fed through ``block_update`` in pieces.

    ``bounds`` are the column indices where new blocks start.  Weights from
    earlier blocks are carried forward through the rescale factors, exactly
    as an output accumulator would be.  Returns ``(weights, lse)``.
    """
    s = np.asarray(s, dtype=_f32)
    state = state_init(s.shape[0])
    edges = [0, *sorted(bounds), s.shape[1]]
    pieces = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi <= lo:
            continue
        p, rescale = block_update(state, s[:, lo:hi])
        pieces = [piece * rescale[:, None] for piece in pieces]
        pieces.append(p)
    inv_l, lse = finalize(state)
    return np.concatenate(pieces, axis=1) * inv_l[:, None], lse
