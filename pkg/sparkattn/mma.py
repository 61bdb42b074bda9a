"""Warp-level model of the Volta ``m8n8k4`` matrix multiply-accumulate.

A warp has 32 lanes split into 4 independent 8-lane computations; group
``g`` is lanes ``8g .. 8g+7``.  Each computation multiplies an 8x4 matrix A
by a 4x8 matrix B and accumulates into an 8x8 matrix C.  Where each logical
element lives (lane within the group, register slot) is described by a
``LayoutDescriptor``; all arithmetic is layout independent.
"""
import enum

import numpy as np

from .exceptions import DimensionMismatch, DomainMismatch, LayoutError
from .half import AccMode, dot4_acc

LANES = 32
GROUP_LANES = 8
GROUPS = LANES // GROUP_LANES


class Role(enum.Enum):
    A = "A"
    B = "B"
    C_FP16 = "C_FP16"
    C_FP32 = "C_FP32"

    @property
    def shape(self):
        return _role_shapes[self]

    @property
    def dtype(self):
        return np.dtype(np.float32) if self is Role.C_FP32 else np.dtype(np.float16)


_role_shapes = {
    Role.A: (8, 4),
    Role.B: (4, 8),
    Role.C_FP16: (8, 8),
    Role.C_FP32: (8, 8),
}


class LayoutDescriptor:
    """Bijection between (lane-in-group, slot) and (row, col) of a role's matrix.

    ``rows[lane, slot]`` and ``cols[lane, slot]`` give the logical coordinates
    held by each register; ``lane_of[row, col]`` and ``slot_of[row, col]`` are
    the inverse.

    >>> A_LAYOUT.slots, B_LAYOUT.slots, C32_LAYOUT.slots
    (4, 4, 8)
    >>> int(C32_LAYOUT.lane_of[2, 0]), int(C32_LAYOUT.lane_of[2, 4])
    (0, 2)
    """

    def __init__(self, role, rows, cols, name=None):
        self.role = Role(role)
        self.rows = np.asarray(rows, dtype=np.intp)
        self.cols = np.asarray(cols, dtype=np.intp)
        self.name = name or self.role.value
        nrows, ncols = self.role.shape
        if self.rows.shape != self.cols.shape or self.rows.shape[0] != GROUP_LANES:
            raise LayoutError(f"{self.name}: maps must be shaped (8, slots)")
        if self.rows.size != nrows * ncols:
            raise LayoutError(
                f"{self.name}: {self.rows.size} registers cannot cover a {nrows}x{ncols} matrix"
            )
        if (
            self.rows.min() < 0
            or self.cols.min() < 0
            or self.rows.max() >= nrows
            or self.cols.max() >= ncols
        ):
            raise LayoutError(f"{self.name}: coordinates outside the {nrows}x{ncols} matrix")
        lane_of = np.full((nrows, ncols), -1, dtype=np.intp)
        slot_of = np.full((nrows, ncols), -1, dtype=np.intp)
        lanes, slots = np.indices(self.rows.shape)
        lane_of[self.rows, self.cols] = lanes
        slot_of[self.rows, self.cols] = slots
        if (lane_of < 0).any():
            raise LayoutError(f"{self.name}: map is not a bijection")
        self.lane_of = lane_of
        self.slot_of = slot_of

    @property
    def slots(self):
        return self.rows.shape[1]

    @property
    def shape(self):
        return self.role.shape

    @property
    def dtype(self):
        return self.role.dtype

    def __repr__(self):
        return f"<LayoutDescriptor {self.name} role={self.role.value} slots={self.slots}>"


def _a_layout():
    # lane t owns row t, four contiguous columns
    rows = [[t] * 4 for t in range(8)]
    cols = [list(range(4)) for _ in range(8)]
    return LayoutDescriptor(Role.A, rows, cols, name="A")


def _b_layout():
    # lane t owns column t, four contiguous rows
    rows = [list(range(4)) for _ in range(8)]
    cols = [[t] * 4 for t in range(8)]
    return LayoutDescriptor(Role.B, rows, cols, name="B")


def _c16_layout():
    # lane t owns row t as two 4-element halves
    rows = [[t] * 8 for t in range(8)]
    cols = [list(range(8)) for _ in range(8)]
    return LayoutDescriptor(Role.C_FP16, rows, cols, name="C_FP16")


def _c32_layout():
    # lanes t and t^2 share rows t and t^2: the lane with bit 1 clear holds
    # columns 0..3 of both rows, its partner holds columns 4..7
    rows, cols = [], []
    for t in range(8):
        half = 4 if t & 2 else 0
        rows.append([t] * 4 + [t ^ 2] * 4)
        cols.append([half + c for c in range(4)] * 2)
    return LayoutDescriptor(Role.C_FP32, rows, cols, name="C_FP32")


A_LAYOUT = _a_layout()
B_LAYOUT = _b_layout()
C16_LAYOUT = _c16_layout()
C32_LAYOUT = _c32_layout()

_default_descriptors = {
    Role.A: A_LAYOUT,
    Role.B: B_LAYOUT,
    Role.C_FP16: C16_LAYOUT,
    Role.C_FP32: C32_LAYOUT,
}


def default_descriptor(role):
    """The descriptor used for ``role`` unless another is supplied."""
    return _default_descriptors[Role(role)]


def accumulator_role(mode):
    """C role implied by an accumulation mode.

    >>> accumulator_role("fp16")
    <Role.C_FP16: 'C_FP16'>
    """
    return Role.C_FP32 if AccMode.parse(mode) is AccMode.FP32_ACC else Role.C_FP16


class WarpFragment:
    """Register contents of one MMA operand across a full warp.

    ``regs`` has shape ``(32, desc.slots)``; lanes ``8g .. 8g+7`` belong to
    computation ``g``.
    """

    def __init__(self, desc, regs=None):
        self.desc = desc
        if regs is None:
            regs = np.zeros((LANES, desc.slots), dtype=desc.dtype)
        regs = np.asarray(regs)
        if regs.shape != (LANES, desc.slots):
            raise DimensionMismatch(
                f"{desc.name} fragment registers must be shaped {(LANES, desc.slots)}; "
                f"got {regs.shape}"
            )
        if regs.dtype != desc.dtype:
            raise DomainMismatch(f"{desc.name} fragment holds {desc.dtype}, not {regs.dtype}")
        self.regs = regs

    @property
    def role(self):
        return self.desc.role

    def group(self, g):
        """Registers of computation ``g`` (a view)."""
        _check_group(g)
        return self.regs[g * GROUP_LANES : (g + 1) * GROUP_LANES]

    def copy(self):
        return WarpFragment(self.desc, self.regs.copy())

    def __repr__(self):
        return f"<WarpFragment {self.desc.name} dtype={self.regs.dtype}>"


def _check_group(g):
    if not 0 <= g < GROUPS:
        raise DimensionMismatch(f"computation index must be in 0..{GROUPS - 1}; got {g}")


def new(desc):
    """Create an all-zero fragment laid out by ``desc``.

    >>> frag = new(A_LAYOUT)
    >>> frag.regs.shape
    (32, 4)
    """
    return WarpFragment(desc)


def distribute(m, desc, group=0, frag=None):
    """Load logical matrix ``m`` into computation ``group`` of a fragment.

    A new zero fragment is created when ``frag`` is None; otherwise ``frag``
    is filled in place and returned.

    >>> m = np.arange(32, dtype=np.float16).reshape(8, 4)
    >>> frag = distribute(m, A_LAYOUT, group=1)
    >>> frag.regs[9].tolist()
    [4.0, 5.0, 6.0, 7.0]
    """
    m = np.asarray(m)
    if m.shape != desc.shape:
        raise DimensionMismatch(f"{desc.name} operand must be {desc.shape}; got {m.shape}")
    if frag is None:
        frag = new(desc)
    elif frag.desc.role is not desc.role:
        raise DomainMismatch(
            f"cannot load a {desc.name} operand into a {frag.desc.name} fragment"
        )
    frag.group(group)[...] = m[desc.rows, desc.cols].astype(desc.dtype)
    return frag


def gather(frag, group=0, desc=None):
    """Reconstruct the logical matrix held by computation ``group``.

    >>> m = np.arange(64, dtype=np.float32).reshape(8, 8)
    >>> bool((gather(distribute(m, C32_LAYOUT)) == m).all())
    True
    """
    if desc is None:
        desc = frag.desc
    elif desc.role is not frag.desc.role:
        raise DomainMismatch(f"cannot read a {frag.desc.name} fragment as {desc.name}")
    out = np.empty(desc.shape, dtype=desc.dtype)
    out[desc.rows, desc.cols] = frag.group(group)
    return out


def mma_m8n8k4(a, b, c, mode, groups=None):
    """Execute one warp-wide ``m8n8k4`` instruction.

    Each computation group computes ``A @ B + C`` under the ``dot4_acc``
    rounding contract.  Every lane reads its operands only from registers of
    lanes in its own group.  Groups not listed in ``groups`` keep their C
    registers unchanged.
    """
    mode = AccMode.parse(mode)
    if a.role is not Role.A or b.role is not Role.B:
        raise DomainMismatch(f"mma_m8n8k4 expects A and B operands; got {a.role} and {b.role}")
    if c.role is not accumulator_role(mode):
        raise DomainMismatch(
            f"{mode.name} accumulates into {accumulator_role(mode).value}, not {c.role.value}"
        )
    if groups is None:
        groups = range(GROUPS)
    groups = list(groups)
    for g in groups:
        _check_group(g)
    ad, bd, cd = a.desc, b.desc, c.desc
    ra = a.regs.reshape(GROUPS, GROUP_LANES, ad.slots)
    rb = b.regs.reshape(GROUPS, GROUP_LANES, bd.slots)
    rc = c.regs.reshape(GROUPS, GROUP_LANES, cd.slots)
    ks = np.arange(4)
    rows = cd.rows[..., None]
    cols = cd.cols[..., None]
    # operand values each C register needs, shaped (groups, lanes, slots, k)
    a_vals = ra[:, ad.lane_of[rows, ks], ad.slot_of[rows, ks]]
    b_vals = rb[:, bd.lane_of[ks, cols], bd.slot_of[ks, cols]]
    result = rc.copy()
    result[groups] = dot4_acc(a_vals[groups], b_vals[groups], rc[groups], mode)
    return WarpFragment(cd, result.reshape(LANES, cd.slots))


def mma_count(m, n, k):
    """Number of ``m8n8k4`` computations needed for an (m x k) @ (k x n) tile.

    >>> mma_count(64, 64, 64)
    1024
    """
    return (m // 8) * (n // 8) * (k // 4)


def _check_tile(a, b, c):
    if a.ndim != 2 or b.ndim != 2 or c.ndim != 2:
        raise DimensionMismatch("tile operands must be matrices")
    (m, k), (k2, n) = a.shape, b.shape
    if k != k2 or c.shape != (m, n):
        raise DimensionMismatch(
            f"cannot compute {a.shape} @ {b.shape} + {c.shape}"
        )
    if m % 8 or n % 8 or k % 4:
        raise DimensionMismatch(
            f"tile dimensions must be multiples of (8, 8, 4); got m={m}, n={n}, k={k}"
        )
    return m, n, k


def tile_mma(a, b, c, mode, counter=None):
    """``a @ b + c`` over a tile, vectorized over all of its 8x8 output blocks.

    Each output element goes through the same sequence of ``dot4_acc`` steps
    (k in ascending order) as it would through ``mma_m8n8k4``, so the result
    is bit-identical to ``warp_tile_mma``.
    """
    mode = AccMode.parse(mode)
    a = np.asarray(a, dtype=np.float16)
    b = np.asarray(b, dtype=np.float16)
    acc = np.array(c, dtype=mode.dtype)
    m, n, k = _check_tile(a, b, acc)
    bt = b.T
    for k0 in range(0, k, 4):
        acc = dot4_acc(a[:, None, k0 : k0 + 4], bt[None, :, k0 : k0 + 4], acc, mode)
    if counter is not None:
        counter.mma_invocations += mma_count(m, n, k)
    return acc


def warp_tile_mma(a, b, c, mode, counter=None, warps=4):
    """``a @ b + c`` over a tile, executed instruction by instruction on warps.

    Warp ``w`` takes 8-row bands ``w, w + warps, ...``; within a band the
    8x8 output blocks are handed four at a time to the warp's computation
    groups.  Accumulators stay in C fragments across the k loop.
    """
    mode = AccMode.parse(mode)
    a = np.asarray(a, dtype=np.float16)
    b = np.asarray(b, dtype=np.float16)
    out = np.array(c, dtype=mode.dtype)
    m, n, k = _check_tile(a, b, out)
    cdesc = default_descriptor(accumulator_role(mode))
    col_blocks = list(range(n // 8))
    for w in range(warps):
        for rb in range(w, m // 8, warps):
            rs = slice(rb * 8, rb * 8 + 8)
            for start in range(0, len(col_blocks), GROUPS):
                batch = col_blocks[start : start + GROUPS]
                active = range(len(batch))
                cf = new(cdesc)
                for g, cb in enumerate(batch):
                    distribute(out[rs, cb * 8 : cb * 8 + 8], cdesc, g, cf)
                for k0 in range(0, k, 4):
                    af = new(A_LAYOUT)
                    bf = new(B_LAYOUT)
                    for g, cb in enumerate(batch):
                        distribute(a[rs, k0 : k0 + 4], A_LAYOUT, g, af)
                        distribute(b[k0 : k0 + 4, cb * 8 : cb * 8 + 8], B_LAYOUT, g, bf)
                    cf = mma_m8n8k4(af, bf, cf, mode, groups=active)
                for g, cb in enumerate(batch):
                    out[rs, cb * 8 : cb * 8 + 8] = gather(cf, g)
    if counter is not None:
        counter.mma_invocations += mma_count(m, n, k)
    return out


ENGINES = ("vector", "warp")


def tile_matmul(a, b, c, mode, *, engine="vector", counter=None, warps=4):
    """Dispatch a tile product to the named engine.

    An output width that is 4 mod 8 (head dimension 4, 12, ...) is padded
    with zero columns of ``b`` and ``c``; the padded columns are dropped
    from the result and still count toward ``mma_invocations``.

    >>> a = np.ones((8, 4), np.float16)
    >>> tile_matmul(a, np.ones((4, 4), np.float16), np.zeros((8, 4), np.float32), "fp32").shape
    (8, 4)
    """
    if engine not in ENGINES:
        raise DomainMismatch(f"unknown engine {engine!r}; expected one of {ENGINES}")
    b = np.asarray(b)
    c = np.asarray(c)
    n = c.shape[-1]
    pad = -n % 8 if b.ndim == 2 and c.ndim == 2 and b.shape[1] == n else 0
    if pad:
        b = np.pad(b, ((0, 0), (0, pad)))
        c = np.pad(c, ((0, 0), (0, pad)))
    if engine == "vector":
        out = tile_mma(a, b, c, mode, counter=counter)
    else:
        out = warp_tile_mma(a, b, c, mode, counter=counter, warps=warps)
    return out[:, :n] if pad else out
