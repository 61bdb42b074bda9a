"""Warp-level transforms from MMA accumulator layout to MMA operand A layout.

The P tile produced in C registers feeds the P @ V product as operand A.
Under FP16 accumulation the C layout already splits into two valid A
fragments inside each lane.  Under FP32 accumulation half of every row lives
in the partner lane ``t ^ 2``, so those registers are exchanged with
``shfl_xor`` and then narrowed to binary16.

Which registers move is derived from the descriptors, so any C_FP32 layout
whose foreign elements come only from lane ``t ^ 2`` works.
"""
import math

import numpy as np

from . import mma
from .exceptions import DimensionMismatch, DomainMismatch, InvalidValue, LayoutError
from .half import AccMode, f32_to_f16

XOR_MASK = 2


class ShuffleLog:
    """Record of ``shfl_xor`` instructions issued during transforms.

    >>> log = ShuffleLog()
    >>> _ = shfl_xor(np.zeros((32, 1), np.float32), 2, log=log)
    >>> log.instructions, sorted(log.partners())[:2]
    (1, [(0, 2), (1, 3)])
    """

    def __init__(self):
        self.events = []

    def record(self, mask, slots):
        for slot in slots:
            self.events.append((mask, int(slot)))

    @property
    def instructions(self):
        return len(self.events)

    def partners(self):
        """Unordered lane pairs that exchanged data."""
        pairs = set()
        for mask, _ in self.events:
            if mask == 0:
                continue
            for lane in range(mma.LANES):
                pairs.add(tuple(sorted((lane, lane ^ mask))))
        return pairs


def shfl_xor(regs, mask, slots=None, log=None):
    """Each lane ``t`` receives the selected registers of lane ``t ^ mask``.

    Registers outside ``slots`` are left in place.  Applying the same
    exchange twice restores the input.

    >>> regs = np.arange(32, dtype=np.float32).reshape(32, 1)
    >>> shfl_xor(regs, 2)[:4, 0].tolist()
    [2.0, 3.0, 0.0, 1.0]
    """
    if not 0 <= mask < mma.LANES:
        raise InvalidValue(f"lane mask must be in 0..{mma.LANES - 1}; got {mask}")
    regs = np.asarray(regs)
    if slots is None:
        slots = range(regs.shape[1])
    slots = list(slots)
    src = np.arange(mma.LANES) ^ mask
    out = regs.copy()
    out[:, slots] = regs[src][:, slots]
    if log is not None:
        log.record(mask, slots)
    return out


def _plan(cdesc, adesc, half):
    """Source (lane, slot) in C for every A register of sub-tile ``half``."""
    rows = adesc.rows
    cols = adesc.cols + 4 * half
    return cdesc.lane_of[rows, cols], cdesc.slot_of[rows, cols]


def exchanged_slots(cdesc, adesc=mma.A_LAYOUT):
    """C slots that must cross lanes to build both A sub-tiles.

    >>> exchanged_slots(mma.C32_LAYOUT)
    [4, 5, 6, 7]
    >>> exchanged_slots(mma.C16_LAYOUT)
    []
    """
    lanes = np.arange(mma.GROUP_LANES)[:, None]
    slots = set()
    for half in (0, 1):
        src_lane, src_slot = _plan(cdesc, adesc, half)
        remote = src_lane != lanes
        partner = np.broadcast_to(lanes ^ XOR_MASK, src_lane.shape)
        if (src_lane[remote] != partner[remote]).any():
            raise LayoutError(
                f"{cdesc.name} needs lane traffic other than the xor-{XOR_MASK} exchange"
            )
        slots.update(src_slot[remote].tolist())
    return sorted(slots)


def _split(regs, cdesc, adesc, shuffled=None):
    lanes = np.arange(mma.GROUP_LANES)[:, None]
    grouped = regs.reshape(mma.GROUPS, mma.GROUP_LANES, cdesc.slots)
    if shuffled is not None:
        shuffled = shuffled.reshape(mma.GROUPS, mma.GROUP_LANES, cdesc.slots)
    halves = []
    for half in (0, 1):
        src_lane, src_slot = _plan(cdesc, adesc, half)
        local = grouped[:, lanes, src_slot]
        if shuffled is None:
            values = local
        else:
            values = np.where(src_lane == lanes, local, shuffled[:, lanes, src_slot])
        halves.append(values.reshape(mma.LANES, adesc.slots))
    return halves


def transform_c16_to_a(frag, adesc=mma.A_LAYOUT):
    """Split an FP16 accumulator into the two A fragments it contains.

    Returns ``(a_lo, a_hi)`` holding columns 0..3 and 4..7 of every
    computation's 8x8 matrix.  Only same-lane register moves are used.
    """
    if frag.role is not mma.Role.C_FP16:
        raise DomainMismatch(f"transform_c16_to_a expects a C_FP16 fragment; got {frag.role.value}")
    if exchanged_slots(frag.desc, adesc):
        raise LayoutError(f"{frag.desc.name} does not split into A without lane traffic")
    lo, hi = _split(frag.regs, frag.desc, adesc)
    return mma.WarpFragment(adesc, lo), mma.WarpFragment(adesc, hi)


def transform_c32_to_a(frag, adesc=mma.A_LAYOUT, log=None, counter=None, groups=mma.GROUPS):
    """Exchange with the xor-2 partner, then narrow an FP32 accumulator to two A fragments.

    Every element is rounded to binary16 exactly once.  ``groups`` is the
    number of computations holding live data, used only for counting.
    """
    if frag.role is not mma.Role.C_FP32:
        raise DomainMismatch(f"transform_c32_to_a expects a C_FP32 fragment; got {frag.role.value}")
    slots = exchanged_slots(frag.desc, adesc)
    shuffled = shfl_xor(frag.regs, XOR_MASK, slots=slots, log=log)
    lo, hi = _split(frag.regs, frag.desc, adesc, shuffled)
    if counter is not None:
        counter.shuffle_events += len(slots)
        counter.layout_converts += groups * 64
    return (
        mma.WarpFragment(adesc, f32_to_f16(lo)),
        mma.WarpFragment(adesc, f32_to_f16(hi)),
    )


def c_tile_to_a(p, mode, *, engine="vector", counter=None, log=None):
    """Turn an accumulator-layout tile into a binary16 operand-A tile.

    ``p`` must already carry the accumulator element type of ``mode``.  The
    logical content is unchanged apart from the single binary32 to binary16
    rounding under ``FP32_ACC``.  Only register-level counters move.
    """
    mode = AccMode.parse(mode)
    p = np.asarray(p)
    if p.dtype != mode.dtype:
        raise DomainMismatch(f"{mode.name} tile must hold {mode.dtype}; got {p.dtype}")
    if p.ndim != 2 or p.shape[0] % 8 or p.shape[1] % 8:
        raise DimensionMismatch(f"tile must be a matrix of 8x8 blocks; got {p.shape}")
    m, n = p.shape
    blocks = [(rb, cb) for rb in range(m // 8) for cb in range(n // 8)]
    if engine == "vector":
        if mode is AccMode.FP16_ACC:
            return p.copy()
        if counter is not None:
            counter.shuffle_events += math.ceil(len(blocks) / mma.GROUPS) * len(
                exchanged_slots(mma.C32_LAYOUT)
            )
            counter.layout_converts += m * n
        return f32_to_f16(p)
    if engine != "warp":
        raise DomainMismatch(f"unknown engine {engine!r}; expected one of {mma.ENGINES}")
    cdesc = mma.default_descriptor(mma.accumulator_role(mode))
    out = np.empty((m, n), dtype=np.float16)
    for start in range(0, len(blocks), mma.GROUPS):
        batch = blocks[start : start + mma.GROUPS]
        frag = mma.new(cdesc)
        for g, (rb, cb) in enumerate(batch):
            mma.distribute(p[rb * 8 : rb * 8 + 8, cb * 8 : cb * 8 + 8], cdesc, g, frag)
        if mode is AccMode.FP16_ACC:
            lo, hi = transform_c16_to_a(frag)
        else:
            lo, hi = transform_c32_to_a(frag, log=log, counter=counter, groups=len(batch))
        for g, (rb, cb) in enumerate(batch):
            rs = slice(rb * 8, rb * 8 + 8)
            out[rs, cb * 8 : cb * 8 + 4] = mma.gather(lo, g)
            out[rs, cb * 8 + 4 : cb * 8 + 8] = mma.gather(hi, g)
    return out
