"""Fused tiled attention forward and the three-pass baseline.

Work is split into (batch, head, query-tile) units.  A unit loads its Q tile
once and walks the key tiles: S = Q K^T on the MMA model, online softmax in
binary32, rescale of the O accumulator, layout transform of P into an A
operand, dropout, then O += P V.  Only Q, K, V are read and only O (plus
the per-row log-sum-exp) is written.

Closed-form traffic for ``B`` batches, ``H`` heads, ``T = N / Br`` query
tiles and ``v_i`` visited key tiles in query tile ``i`` (``v_i = N / Bc``
without a causal mask)::

    fused        element_reads  = B H (N d + 2 Bc d sum_i v_i)
                 element_writes = B H (N d + N)
    traditional  element_reads  = B H (3 N d + 2 N^2)
                 element_writes = B H (N d + N + 2 N^2)

``fused_traffic`` evaluates these for a config.
"""
import concurrent.futures
import dataclasses
import logging
import math

import numpy as np

from . import mma
from .exceptions import DimensionMismatch
from .half import AccMode, f16_to_f32, f32_to_f16
from .layout import c_tile_to_a
from .prng import MaskLedger, dropout_scale, dropout_tile
from .softmax import block_update, finalize, state_init
from .traffic import TrafficCounter

__all__ = [
    "ForwardOutput",
    "forward_fused",
    "forward_traditional",
    "fused_traffic",
    "visible_key_tiles",
    "causal_tile_mask",
    "SOFTMAX_SHUFFLES_PER_FRAGMENT",
]

logger = logging.getLogger(__name__)

# C_FP32 splits each of a lane's two rows with its xor-2 partner; the row
# max and the row sum each cost one exchange per row.
SOFTMAX_SHUFFLES_PER_FRAGMENT = 4

_f32 = np.float32


@dataclasses.dataclass
class ForwardOutput:
    """``O`` in binary16, ``lse`` in binary32, the run's counters and mask digest."""

    O: np.ndarray  # noqa: E741
    lse: np.ndarray
    traffic: TrafficCounter
    mask_hash: str


def check_inputs(cfg, **tensors):
    for name, x in tensors.items():
        if x.shape != cfg.shape:
            raise DimensionMismatch(f"{name} must have shape {cfg.shape}; got {x.shape}")
    return {name: np.asarray(x, dtype=np.float16) for name, x in tensors.items()}


def visible_key_tiles(cfg, i):
    """Key tiles a query tile touches; strictly-upper tiles are skipped under a causal mask.

    >>> from sparkattn.config import AttnConfig
    >>> cfg = AttnConfig(seq_len=256, head_dim=64, causal=True)
    >>> [len(visible_key_tiles(cfg, i)) for i in range(cfg.q_tiles)]
    [1, 2, 3, 4]
    """
    if not cfg.causal:
        return range(cfg.k_tiles)
    last_row = (i + 1) * cfg.tile_rows - 1
    return range(min(cfg.k_tiles, last_row // cfg.tile_cols + 1))


def causal_tile_mask(row0, col0, rows, cols):
    """True where key column exceeds query row, or None if nothing in the tile is masked."""
    if col0 + cols - 1 <= row0:
        return None
    r = np.arange(row0, row0 + rows)[:, None]
    c = np.arange(col0, col0 + cols)[None, :]
    return c > r


def fused_traffic(cfg):
    """Closed-form element and MMA counts of ``forward_fused``.

    >>> from sparkattn.config import AttnConfig
    >>> fused_traffic(AttnConfig(seq_len=128, head_dim=64, tile_rows=64, tile_cols=64))
    {'element_reads': 40960, 'element_writes': 8320, 'mma_invocations': 8192}
    """
    bh = cfg.batch * cfg.heads
    n, d, br, bc = cfg.seq_len, cfg.head_dim, cfg.tile_rows, cfg.tile_cols
    visited = sum(len(visible_key_tiles(cfg, i)) for i in range(cfg.q_tiles))
    d8 = d + (-d % 8)
    per_tile = mma.mma_count(br, bc, d) + mma.mma_count(br, d8, bc)
    return {
        "element_reads": bh * (n * d + 2 * bc * d * visited),
        "element_writes": bh * (n * d + n),
        "mma_invocations": bh * per_tile * visited,
    }


def softmax_shuffles(rows, cols, mode):
    """Warp exchanges spent on row reductions of one score tile."""
    if AccMode.parse(mode) is AccMode.FP16_ACC:
        return 0
    fragments = math.ceil((rows // 8) * (cols // 8) / mma.GROUPS)
    return SOFTMAX_SHUFFLES_PER_FRAGMENT * fragments


def map_units(fn, units, workers):
    """``[fn(u) for u in units]``, on a thread pool when ``workers > 1``."""
    if workers <= 1:
        return [fn(unit) for unit in units]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, units))


def _scores(q, k, cfg, counter, row0, col0):
    """Scaled, masked binary32 score tile."""
    mode = cfg.acc_mode
    rows, cols = q.shape[0], k.shape[0]
    s = mma.tile_matmul(
        q,
        k.T,
        np.zeros((rows, cols), dtype=mode.dtype),
        mode,
        engine=cfg.engine,
        counter=counter,
        warps=cfg.warps,
    )
    if mode is AccMode.FP16_ACC:
        s = f16_to_f32(s)
        counter.convert_events += rows * cols
    else:
        counter.shuffle_events += softmax_shuffles(rows, cols, mode)
    s = s * _f32(cfg.scale)
    if cfg.causal:
        masked = causal_tile_mask(row0, col0, rows, cols)
        if masked is not None:
            s[masked] = -np.inf
    return s


def _fused_unit(cfg, Q, K, V, unit, log=None):
    b, h, i = unit
    mode = cfg.acc_mode
    br, bc, d = cfg.tile_rows, cfg.tile_cols, cfg.head_dim
    row0 = i * br
    counter = TrafficCounter()
    ledger = MaskLedger()
    q = Q[b, h, row0 : row0 + br]
    counter.read(q.size)
    state = state_init(br)
    o = np.zeros((br, d), dtype=mode.dtype)
    for j in visible_key_tiles(cfg, i):
        col0 = j * bc
        k = K[b, h, col0 : col0 + bc]
        v = V[b, h, col0 : col0 + bc]
        counter.read(k.size + v.size)
        s = _scores(q, k, cfg, counter, row0, col0)
        p, rescale = block_update(state, s)
        if mode is AccMode.FP16_ACC:
            o = f32_to_f16(f16_to_f32(o) * rescale[:, None])
            counter.convert_events += 2 * o.size
        else:
            o = (o * rescale[:, None]).astype(_f32)
        if cfg.dropout_p > 0:
            keep = dropout_tile(cfg.seed, b, h, row0, col0, br, bc, cfg.dropout_p)
            ledger.record(b, h, row0, col0, keep)
            p = np.where(keep, p * _f32(dropout_scale(cfg.dropout_p)), _f32(0))
        if mode is AccMode.FP16_ACC:
            p = f32_to_f16(p)
            counter.convert_events += p.size
        pa = c_tile_to_a(p, mode, engine=cfg.engine, counter=counter, log=log)
        o = mma.tile_matmul(pa, v, o, mode, engine=cfg.engine, counter=counter, warps=cfg.warps)
    inv_l, lse = finalize(state)
    if mode is AccMode.FP16_ACC:
        out = f32_to_f16(f16_to_f32(o) * inv_l[:, None])
        counter.convert_events += 2 * o.size
    else:
        out = f32_to_f16(o * inv_l[:, None])
    counter.write(out.size + lse.size)
    logger.debug("forward unit %s: %s", unit, counter)
    return out, lse, counter, ledger


def forward_fused(Q, K, V, cfg, *, log=None):
    """Fused forward over all (batch, head, query-tile) units.

    ``log`` collects the ``shfl_xor`` instructions of the warp engine's
    layout transforms.
    """
    t = check_inputs(cfg, Q=Q, K=K, V=V)
    Q, K, V = t["Q"], t["K"], t["V"]
    logger.debug("forward_fused %s", cfg)
    units = [
        (b, h, i) for b in range(cfg.batch) for h in range(cfg.heads) for i in range(cfg.q_tiles)
    ]
    results = map_units(lambda u: _fused_unit(cfg, Q, K, V, u, log), units, cfg.workers)
    O = np.empty(cfg.shape, dtype=np.float16)
    lse = np.empty(cfg.shape[:3], dtype=_f32)
    ledger = MaskLedger()
    traffic = TrafficCounter(matrix_pass_reads=3, matrix_pass_writes=1)
    for (b, h, i), (out, unit_lse, counter, unit_ledger) in zip(units, results):
        rows = slice(i * cfg.tile_rows, (i + 1) * cfg.tile_rows)
        O[b, h, rows] = out
        lse[b, h, rows] = unit_lse
        traffic += counter
        ledger.update(unit_ledger)
    logger.debug("forward_fused traffic %s", traffic)
    return ForwardOutput(O, lse, traffic, ledger.hexdigest())


def forward_traditional(Q, K, V, cfg):
    """Three passes with S and P materialized in modeled HBM.

    Pass one writes S in the accumulator type, pass two applies the full-row
    softmax and dropout and writes P in binary16, pass three computes P V.
    Every score tile is computed, masked or not.
    """
    t = check_inputs(cfg, Q=Q, K=K, V=V)
    Q, K, V = t["Q"], t["K"], t["V"]
    mode = cfg.acc_mode
    n, d = cfg.seq_len, cfg.head_dim
    O = np.empty(cfg.shape, dtype=np.float16)
    lse = np.empty(cfg.shape[:3], dtype=_f32)
    ledger = MaskLedger()
    traffic = TrafficCounter(matrix_pass_reads=5, matrix_pass_writes=3)
    mm = dict(engine=cfg.engine, counter=traffic, warps=cfg.warps)
    for b in range(cfg.batch):
        for h in range(cfg.heads):
            # pass 1: S = Q K^T
            traffic.read(2 * n * d)
            s = mma.tile_matmul(Q[b, h], K[b, h].T, np.zeros((n, n), mode.dtype), mode, **mm)
            traffic.write(n * n)
            # pass 2: P = dropout(softmax(scale S))
            traffic.read(n * n)
            if mode is AccMode.FP16_ACC:
                s = f16_to_f32(s)
                traffic.convert_events += n * n
            s = s * _f32(cfg.scale)
            if cfg.causal:
                s[causal_tile_mask(0, 0, n, n)] = -np.inf
            state = state_init(n)
            p, _ = block_update(state, s)
            inv_l, lse[b, h] = finalize(state)
            p = p * inv_l[:, None]
            if cfg.dropout_p > 0:
                keep = dropout_tile(cfg.seed, b, h, 0, 0, n, n, cfg.dropout_p)
                _record_tiles(ledger, cfg, b, h, keep)
                p = np.where(keep, p * _f32(dropout_scale(cfg.dropout_p)), _f32(0))
            p = f32_to_f16(p)
            traffic.convert_events += n * n
            traffic.write(n * n + n)
            # pass 3: O = P V
            traffic.read(n * n + n * d)
            o = mma.tile_matmul(p, V[b, h], np.zeros((n, d), mode.dtype), mode, **mm)
            O[b, h] = f32_to_f16(o)
            traffic.write(n * d)
    return ForwardOutput(O, lse, traffic, ledger.hexdigest())


def _record_tiles(ledger, cfg, b, h, keep):
    # same tile grid as the fused path so the digests compare
    for i in range(cfg.q_tiles):
        for j in visible_key_tiles(cfg, i):
            r, c = i * cfg.tile_rows, j * cfg.tile_cols
            ledger.record(b, h, r, c, keep[r : r + cfg.tile_rows, c : c + cfg.tile_cols])
