"""Fused attention backward by recomputation.

Units are (batch, head, key-tile).  A unit keeps its K and V tiles and its
dK and dV accumulators on chip and walks the query tiles, recomputing
``P = exp(scale * Q K^T - lse)`` instead of reading it.  The dQ
contribution of every (query-tile, key-tile) pair goes to a binary32 buffer
that models an atomic-add target in HBM; it is rounded to binary16 once at
the end.  Only ``FP16_ACC`` is supported.

Passes: a pre-pass reads dO and O and writes dPsum; the main pass reads Q,
K, V, dO, lse and dPsum and writes dQ, dK and dV.
"""
import dataclasses
import logging

import numpy as np

from . import mma
from .exceptions import DimensionMismatch, InvalidValue, NumericalFault, UnsupportedMode
from .forward import _scores, check_inputs, forward_fused, map_units, visible_key_tiles
from .half import AccMode, f16_to_f32, f32_to_f16, ulp_distance
from .layout import c_tile_to_a
from .prng import MaskLedger, dropout_scale, dropout_tile
from .traffic import TrafficCounter

__all__ = [
    "GradOutputs",
    "DqAccumulator",
    "dq_atomic_add",
    "compute_dpsum",
    "backward_fused",
    "permutation_spread",
]

logger = logging.getLogger(__name__)

_f32 = np.float32
# lse handed in must agree with the one recomputed from Q and K
LSE_RTOL = 1e-3
LSE_ATOL = 1e-3


@dataclasses.dataclass
class GradOutputs:
    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray
    traffic: TrafficCounter
    recompute_traffic: TrafficCounter
    mask_hash: str
    dq: "DqAccumulator"


class DqAccumulator:
    """binary32 dQ buffer plus the log of every contribution added to it.

    ``at`` locates a contribution: leading indices into the buffer followed
    by the first row.  ``None`` means the whole buffer.

    >>> acc = DqAccumulator((2, 2))
    >>> _ = dq_atomic_add(acc, np.ones((1, 2)), 0, at=(1,))
    >>> acc.buffer.tolist(), acc.atomic_adds
    ([[0.0, 0.0], [1.0, 1.0]], 2)
    """

    def __init__(self, shape):
        self.buffer = np.zeros(shape, dtype=_f32)
        self.log = []
        self.atomic_adds = 0

    def _target(self, buffer, at, rows):
        if at is None:
            return buffer[...]
        *lead, row0 = at
        return buffer[tuple(lead)][row0 : row0 + rows]

    def add(self, contribution, unit_index, at=None):
        contribution = np.asarray(contribution, dtype=_f32)
        target = self._target(self.buffer, at, contribution.shape[0])
        if target.shape != contribution.shape:
            raise DimensionMismatch(
                f"contribution of shape {contribution.shape} does not fit {target.shape}"
            )
        target += contribution
        self.log.append((unit_index, at, contribution))
        self.atomic_adds += contribution.size

    def result(self):
        """Final dQ: the buffer rounded to binary16 once."""
        return f32_to_f16(self.buffer)

    def replay(self, order=None):
        """Re-add logged contributions in ``order`` (indices into the log) and round."""
        if order is None:
            order = range(len(self.log))
        buffer = np.zeros_like(self.buffer)
        for index in order:
            _, at, contribution = self.log[index]
            self._target(buffer, at, contribution.shape[0])[...] += contribution
        return f32_to_f16(buffer)


def dq_atomic_add(acc, contribution, unit_index, *, at=None):
    """Add one unit's dQ contribution into ``acc`` and return ``acc``."""
    acc.add(contribution, unit_index, at)
    return acc


def permutation_spread(acc, trials=16, seed=0):
    """Largest binary16 ULP difference from the in-order result over random replay orders.

    >>> acc = DqAccumulator((1, 1))
    >>> for u in range(4):
    ...     _ = dq_atomic_add(acc, [[0.25]], u)
    >>> permutation_spread(acc, trials=3)
    0
    """
    rng = np.random.Generator(np.random.Philox(seed))
    reference = acc.result()
    spread = 0
    for _ in range(trials):
        order = rng.permutation(len(acc.log))
        spread = max(spread, int(np.max(ulp_distance(acc.replay(order), reference))))
    return spread


def compute_dpsum(dO, O):
    """Row sums of ``dO * O``, products widened to binary32.

    >>> x = np.array([[1.0, 2.0], [3.0, 0.0]], np.float16)
    >>> compute_dpsum(x, x).tolist()
    [5.0, 9.0]
    """
    dO = np.asarray(dO)
    O = np.asarray(O)
    if dO.shape != O.shape:
        raise DimensionMismatch(f"dO {dO.shape} and O {O.shape} differ in shape")
    return (f16_to_f32(dO) * f16_to_f32(O)).sum(axis=-1, dtype=_f32)


def query_tiles_of(cfg, j):
    """Query tiles that see key tile ``j``."""
    return [i for i in range(cfg.q_tiles) if j in visible_key_tiles(cfg, i)]


def _mm(a, b, shape, cfg, counter):
    # per-tile product into a fresh binary16 accumulator, widened for local sums
    mode = cfg.acc_mode
    c = mma.tile_matmul(
        a, b, np.zeros(shape, dtype=mode.dtype), mode, engine=cfg.engine, counter=counter,
        warps=cfg.warps,
    )
    counter.convert_events += c.size
    return f16_to_f32(c)


def _backward_unit(cfg, t, lse, dpsum, unit):
    b, h, j = unit
    mode = cfg.acc_mode
    br, bc, d = cfg.tile_rows, cfg.tile_cols, cfg.head_dim
    col0 = j * bc
    counter = TrafficCounter()
    ledger = MaskLedger()
    k = t["K"][b, h, col0 : col0 + bc]
    v = t["V"][b, h, col0 : col0 + bc]
    counter.read(k.size + v.size)
    dk = np.zeros((bc, d), dtype=_f32)
    dv = np.zeros((bc, d), dtype=_f32)
    contributions = []
    for i in query_tiles_of(cfg, j):
        row0 = i * br
        rows = slice(row0, row0 + br)
        q = t["Q"][b, h, rows]
        do = t["dO"][b, h, rows]
        counter.read(q.size + do.size + 2 * br)
        s = _scores(q, k, cfg, counter, row0, col0)
        p = np.exp(s - lse[b, h, rows, None]).astype(_f32)
        if cfg.dropout_p > 0:
            keep = dropout_tile(cfg.seed, b, h, row0, col0, br, bc, cfg.dropout_p)
            ledger.record(b, h, row0, col0, keep)
            z = np.where(keep, _f32(dropout_scale(cfg.dropout_p)), _f32(0))
        else:
            z = _f32(1)
        pd = f32_to_f16(p * z)
        counter.convert_events += pd.size
        pa = c_tile_to_a(pd, mode, engine=cfg.engine, counter=counter)
        dv += _mm(pa.T, do, (bc, d), cfg, counter)
        dp = _mm(do, v.T, (br, bc), cfg, counter)
        ds = p * (dp * z - dpsum[b, h, rows, None]) * _f32(cfg.scale)
        ds16 = c_tile_to_a(f32_to_f16(ds), mode, engine=cfg.engine, counter=counter)
        counter.convert_events += ds16.size
        dk += _mm(ds16.T, q, (bc, d), cfg, counter)
        contributions.append((row0, _mm(ds16, k, (br, d), cfg, counter)))
    counter.write(2 * bc * d)
    logger.debug("backward unit %s: %s", unit, counter)
    return f32_to_f16(dk), f32_to_f16(dv), contributions, counter, ledger


def backward_fused(Q, K, V, dO, lse, cfg):
    """Gradients of the fused forward with respect to Q, K and V.

    The forward is re-run to obtain O for dPsum; its counters are returned
    separately as ``recompute_traffic``.  An ``lse`` that the re-run does not
    reproduce within ``LSE_RTOL`` and ``LSE_ATOL`` raises ``InvalidValue``.
    """
    if cfg.acc_mode is not AccMode.FP16_ACC:
        raise UnsupportedMode("the fused backward only runs with FP16 accumulation")
    t = check_inputs(cfg, Q=Q, K=K, V=V, dO=dO)
    lse = np.asarray(lse, dtype=_f32)
    if lse.shape != cfg.shape[:3]:
        raise DimensionMismatch(f"lse must have shape {cfg.shape[:3]}; got {lse.shape}")
    if not np.isfinite(lse).all():
        raise NumericalFault("lse holds non-finite values")
    logger.debug("backward_fused %s", cfg)
    fwd = forward_fused(t["Q"], t["K"], t["V"], cfg)
    drift = np.abs(fwd.lse - lse) - (LSE_ATOL + LSE_RTOL * np.abs(fwd.lse))
    if (drift > 0).any():
        row = np.unravel_index(int(np.argmax(drift)), lse.shape)
        raise InvalidValue(
            f"lse does not match these inputs: row {tuple(int(i) for i in row)} gives "
            f"{float(lse[row])}, recomputed {float(fwd.lse[row])}"
        )
    traffic = TrafficCounter(matrix_pass_reads=8, matrix_pass_writes=4)
    dpsum = compute_dpsum(t["dO"], fwd.O)
    traffic.read(t["dO"].size + fwd.O.size)
    traffic.write(dpsum.size)

    units = [
        (b, h, j) for b in range(cfg.batch) for h in range(cfg.heads) for j in range(cfg.k_tiles)
    ]
    results = map_units(lambda u: _backward_unit(cfg, t, lse, dpsum, u), units, cfg.workers)
    dQ = DqAccumulator(cfg.shape)
    dK = np.empty(cfg.shape, dtype=np.float16)
    dV = np.empty(cfg.shape, dtype=np.float16)
    ledger = MaskLedger()
    # ascending unit order keeps dQ deterministic
    for index, ((b, h, j), (dk, dv, contributions, counter, unit_ledger)) in enumerate(
        zip(units, results)
    ):
        cols = slice(j * cfg.tile_cols, (j + 1) * cfg.tile_cols)
        dK[b, h, cols] = dk
        dV[b, h, cols] = dv
        for row0, part in contributions:
            dq_atomic_add(dQ, part, index, at=(b, h, row0))
        traffic += counter
        ledger.update(unit_ledger)
    traffic.atomic_adds += dQ.atomic_adds
    traffic.write(dQ.buffer.size)
    logger.debug("backward_fused traffic %s", traffic)
    return GradOutputs(
        dQ.result(), dK, dV, traffic, fwd.traffic, ledger.hexdigest(), dQ
    )
