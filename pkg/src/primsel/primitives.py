"""Reference implementations of one convolution primitive per sub-family plus
the three-layout transformation routines.

All primitives compute the same valid (unpadded) convolution and are checked
against direct_conv; they differ in data movement and in the physical layout
they consume and produce. Tensor payloads are 32-bit floats.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import (
    ApplicabilityError,
    LayerConfig,
    Layout,
    LayoutError,
    ShapeError,
    get_spec,
    output_dims,
)


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Tensor3:
    """A square (c, h, w) tensor stored flat in one of the three layouts."""

    layout: Layout
    c: int
    h: int
    w: int
    data: np.ndarray  # 1-D float32, length c*h*w, in layout order

    def __post_init__(self):
        if self.h != self.w:
            raise ShapeError(f"input must be square, got h={self.h} w={self.w}")
        arr = np.ascontiguousarray(self.data, dtype=np.float32).ravel()
        if arr.size != self.c * self.h * self.w:
            raise ShapeError(
                f"data length {arr.size} != c*h*w = {self.c * self.h * self.w}")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.layout.shape(self.c, self.h)

    def view(self) -> np.ndarray:
        """3-D view of the flat storage in this tensor's physical order."""
        return self.data.reshape(self.shape)

    def to_logical(self) -> np.ndarray:
        """Copy out as a logical (c, h, w) array regardless of layout."""
        inv = np.argsort(self.layout.axes)
        return np.ascontiguousarray(self.view().transpose(inv))

    def at(self, ch: int, y: int, x: int) -> float:
        logical = (ch, y, x)
        idx = tuple(logical[a] for a in self.layout.axes)
        return float(self.view()[idx])

    @classmethod
    def from_logical(cls, arr: np.ndarray, layout: Layout) -> "Tensor3":
        a = np.asarray(arr, dtype=np.float32)
        if a.ndim != 3:
            raise ShapeError(f"expected a 3-D array, got shape {a.shape}")
        c, h, w = a.shape
        phys = np.ascontiguousarray(a.transpose(layout.axes))
        return cls(layout, c, h, w, phys.ravel())


@dataclass(frozen=True)
class KernelSet:
    """k kernels of shape (c, f, f), stored flat in (k, c, f, f) order."""

    k: int
    c: int
    f: int
    data: np.ndarray  # 1-D float32, length k*c*f*f

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32).ravel()
        if arr.size != self.k * self.c * self.f * self.f:
            raise ShapeError(
                f"kernel data length {arr.size} != k*c*f*f = "
                f"{self.k * self.c * self.f * self.f}")
        object.__setattr__(self, "data", arr)

    def view(self) -> np.ndarray:
        return self.data.reshape(self.k, self.c, self.f, self.f)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "KernelSet":
        a = np.asarray(arr, dtype=np.float32)
        if a.ndim != 4 or a.shape[2] != a.shape[3]:
            raise ShapeError(f"expected (k, c, f, f), got shape {a.shape}")
        return cls(a.shape[0], a.shape[1], a.shape[2], a.ravel())


def transform_layout(t: Tensor3, to: Layout) -> Tensor3:
    """Reorder the physical storage; logical values are preserved."""
    if to == t.layout:
        return Tensor3(to, t.c, t.h, t.w, t.data)
    inv = np.argsort(t.layout.axes)
    perm = tuple(inv[a] for a in to.axes)  # source axis feeding each target axis
    phys = np.ascontiguousarray(t.view().transpose(perm))
    return Tensor3(to, t.c, t.h, t.w, phys.ravel())


def random_input(config: LayerConfig, layout: Layout,
                 rng: np.random.Generator) -> Tensor3:
    """Normal-distributed input tensor in the requested layout."""
    n = config.c * config.im * config.im
    return Tensor3(layout, config.c, config.im, config.im,
                   rng.standard_normal(n, dtype=np.float32))


def random_kernels(config: LayerConfig, rng: np.random.Generator) -> KernelSet:
    n = config.k * config.c * config.f * config.f
    return KernelSet(config.k, config.c, config.f,
                     rng.standard_normal(n, dtype=np.float32))


# ---------------------------------------------------------------------------
# Winograd transform construction
# ---------------------------------------------------------------------------

def cook_toom_matrices(m: int, r: int):
    """Exact minimal-filtering matrices (AT, G, BT) for F(m, r).

    Built from the classic evaluation/interpolation construction over the
    points 0, +-1, +-2, ... and infinity, with rational arithmetic, then
    converted to float64. Output: y = AT @ ((G @ g) * (BT @ d)) computes the m
    sliding correlations of an n-tap data window d with the r-tap filter g,
    n = m + r - 1.
    """
    n = m + r - 1
    points = [0]
    step = 1
    while len(points) < n - 1:
        points.append(step)
        if len(points) < n - 1:
            points.append(-step)
        step += 1

    def eval_rows(width):
        rows = [[Fraction(p) ** j for j in range(width)] for p in points]
        rows.append([Fraction(0)] * (width - 1) + [Fraction(1)])  # infinity
        return rows

    a_mat = eval_rows(m)   # n x m
    b_mat = eval_rows(r)   # n x r
    vand = eval_rows(n)    # n x n, full degree for the product polynomial
    c_mat = _fraction_inverse(vand)

    at = np.array([[float(a_mat[i][j]) for i in range(n)] for j in range(m)])
    g = np.array([[float(x) for x in row] for row in b_mat])
    bt = np.array([[float(c_mat[i][j]) for i in range(n)] for j in range(n)])
    return at, g, bt


def _fraction_inverse(rows):
    """Gauss-Jordan inverse over exact fractions."""
    n = len(rows)
    aug = [list(r) + [Fraction(int(i == j)) for j in range(n)]
           for i, r in enumerate(rows)]
    for col in range(n):
        pivot = next(i for i in range(col, n) if aug[i][col] != 0)
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv = Fraction(1) / aug[col][col]
        aug[col] = [x * inv for x in aug[col]]
        for i in range(n):
            if i != col and aug[i][col] != 0:
                factor = aug[i][col]
                aug[i] = [a - factor * b for a, b in zip(aug[i], aug[col])]
    return [row[n:] for row in aug]


_WINO = {
    3: cook_toom_matrices(2, 3),
    5: cook_toom_matrices(2, 5),
}


# ---------------------------------------------------------------------------
# Primitive implementations
# ---------------------------------------------------------------------------
# Every runner takes (xv, kv, config) where xv is the 3-D view of the input in
# the primitive's declared layout and kv is the (k, c, f, f) kernel view, and
# returns a 3-D array in the declared output layout.

def _run_direct(xv, kv, config):
    # Sliding-window accumulation: no lowering, no data replication.
    c, f, s = config.c, config.f, config.s
    k = config.k
    o = output_dims(config)
    out = np.zeros((k, o * o), dtype=np.float32)
    span = (o - 1) * s + 1
    for fy in range(f):
        for fx in range(f):
            win = xv[:, fy:fy + span:s, fx:fx + span:s].reshape(c, o * o)
            out += kv[:, :, fy, fx] @ win
    return out.reshape(k, o, o)


def _run_im2col(xv, kv, config):
    # Lower input patches to a (c*f*f, o*o) matrix, one GEMM against kernels.
    c, f, s = config.c, config.f, config.s
    o = output_dims(config)
    span = (o - 1) * s + 1
    patches = np.empty((c, f, f, o, o), dtype=np.float32)
    for fy in range(f):
        for fx in range(f):
            patches[:, fy, fx] = xv[:, fy:fy + span:s, fx:fx + span:s]
    kmat = kv.reshape(config.k, c * f * f)
    out = kmat @ patches.reshape(c * f * f, o * o)
    return out.reshape(config.k, o, o)


def _run_im2row(xv, kv, config):
    # Row-major lowering from HWC: patches are rows, kernels are columns.
    c, f, s = config.c, config.f, config.s
    o = output_dims(config)
    span = (o - 1) * s + 1
    patches = np.empty((o, o, f, f, c), dtype=np.float32)
    for fy in range(f):
        for fx in range(f):
            patches[:, :, fy, fx, :] = xv[fy:fy + span:s, fx:fx + span:s, :]
    kmat = np.ascontiguousarray(kv.transpose(2, 3, 1, 0)).reshape(f * f * c, config.k)
    out = patches.reshape(o * o, f * f * c) @ kmat
    return out.reshape(o, o, config.k)


def _run_kn2row(xv, kv, config):
    # One (f*f*k, c) x (c, h*w) GEMM, then shift-add the f*f blocks. s=1 only.
    c, f, k = config.c, config.f, config.k
    h = config.im
    o = output_dims(config)
    kmat = np.ascontiguousarray(kv.transpose(2, 3, 0, 1)).reshape(f * f * k, c)
    prod = (kmat @ xv.reshape(c, h * h)).reshape(f, f, k, h, h)
    out = np.zeros((k, o, o), dtype=np.float32)
    for fy in range(f):
        for fx in range(f):
            out += prod[fy, fx][:, fy:fy + o, fx:fx + o]
    return out


def _run_kn2col(xv, kv, config):
    # Image-major twin of kn2row, working from HWC: (h*w, c) x (c, f*f*k).
    c, f, k = config.c, config.f, config.k
    h = config.im
    o = output_dims(config)
    kmat = np.ascontiguousarray(kv.transpose(1, 2, 3, 0)).reshape(c, f * f * k)
    prod = (xv.reshape(h * h, c) @ kmat).reshape(h, h, f, f, k)
    out = np.zeros((o, o, k), dtype=np.float32)
    for fy in range(f):
        for fx in range(f):
            out += prod[fy:fy + o, fx:fx + o, fy, fx, :]
    return out


def _direct_block(xv_chw, kv, y0, y1, x0, x1):
    # Direct computation of an output sub-block, stride 1. Used by the
    # winograd runners for trailing partial tiles.
    c = xv_chw.shape[0]
    k, _, f, _ = kv.shape
    oy, ox = y1 - y0, x1 - x0
    out = np.zeros((k, oy * ox), dtype=np.float32)
    for fy in range(f):
        for fx in range(f):
            win = xv_chw[:, y0 + fy:y0 + fy + oy, x0 + fx:x0 + fx + ox]
            out += kv[:, :, fy, fx] @ win.reshape(c, oy * ox)
    return out.reshape(k, oy, ox)


def _run_winograd(xv, kv, config):
    # Tiled minimal-multiplication convolution, 2x2 output tiles; trailing
    # partial tiles fall back to direct computation. s=1 only.
    f = config.f
    at, g, bt = _WINO[f]
    at = at.astype(np.float32)
    g = g.astype(np.float32)
    bt = bt.astype(np.float32)
    c, k = config.c, config.k
    o = output_dims(config)
    t = f + 1  # input tile edge for 2x2 output tiles
    nt = o // 2
    out = np.empty((k, o, o), dtype=np.float32)
    if nt > 0:
        # Kernel transform U = G g G^T for every (k, c) pair.
        u = np.einsum("ia,kcab,jb->ijkc", g, kv, g, optimize=True)
        # Gather input tiles: d[i, j, ch, ty, tx] = x[ch, 2*ty + i, 2*tx + j].
        d = np.empty((t, t, c, nt, nt), dtype=np.float32)
        for i in range(t):
            for j in range(t):
                d[i, j] = xv[:, i:i + 2 * nt - 1:2, j:j + 2 * nt - 1:2]
        v = np.einsum("ia,jb,abcn->ijcn", bt, bt,
                      d.reshape(t, t, c, nt * nt), optimize=True)
        # Elementwise stage: one (k, c) x (c, tiles) product per matrix cell.
        mprod = np.empty((t, t, k, nt * nt), dtype=np.float32)
        for i in range(t):
            for j in range(t):
                mprod[i, j] = u[i, j] @ v[i, j]
        y = np.einsum("ui,vj,ijkn->uvkn", at, at, mprod, optimize=True)
        y = y.reshape(2, 2, k, nt, nt)
        for uu in range(2):
            for vv in range(2):
                out[:, uu:uu + 2 * nt - 1:2, vv:vv + 2 * nt - 1:2] = y[uu, vv]
    main = 2 * nt
    if main < o:
        out[:, main:o, :] = _direct_block(xv, kv, main, o, 0, o)
        if main > 0:
            out[:, :main, main:o] = _direct_block(xv, kv, 0, main, main, o)
    return out


def _run_conv1x1(xv, kv, config):
    # 1x1 kernels: plain channel mixing; strided variants subsample first.
    c, k, s = config.c, config.k, config.s
    o = output_dims(config)
    x = xv[:, ::s, ::s] if s > 1 else xv
    out = kv.reshape(k, c) @ np.ascontiguousarray(x).reshape(c, o * o)
    return out.reshape(k, o, o)


def _run_mec_col(xv, kv, config):
    # Memory-efficient lowering from HCW: one compact column-window matrix,
    # then one small GEMM per output row.
    c, f, s, k = config.c, config.f, config.s, config.k
    h = config.im
    o = output_dims(config)
    lowered = np.empty((o, h, c * f), dtype=np.float32)
    for j in range(o):
        lowered[j] = xv[:, :, j * s:j * s + f].reshape(h, c * f)
    kmat = np.ascontiguousarray(kv.transpose(2, 1, 3, 0)).reshape(f * c * f, k)
    out = np.empty((o, o, k), dtype=np.float32)
    for y in range(o):
        rows = lowered[:, y * s:y * s + f, :].reshape(o, f * c * f)
        out[y] = rows @ kmat
    return out


_RUNNERS = {
    "direct-sum2d": _run_direct,
    "im2col-copy": _run_im2col,
    "im2row-copy": _run_im2row,
    "kn2row": _run_kn2row,
    "kn2col": _run_kn2col,
    "winograd-2x2-3x3": _run_winograd,
    "winograd-2x2-5x5": _run_winograd,
    "conv-1x1-gemm": _run_conv1x1,
    "mec-col": _run_mec_col,
}


def _check_shapes(t: Tensor3, kernels: KernelSet, config: LayerConfig):
    if (t.c, t.h, t.w) != (config.c, config.im, config.im):
        raise ShapeError(
            f"input dims ({t.c}, {t.h}, {t.w}) do not match config "
            f"(c={config.c}, im={config.im})")
    if (kernels.k, kernels.c, kernels.f) != (config.k, config.c, config.f):
        raise ShapeError(
            f"kernel dims (k={kernels.k}, c={kernels.c}, f={kernels.f}) do not "
            f"match config (k={config.k}, c={config.c}, f={config.f})")


def direct_conv(t: Tensor3, kernels: KernelSet, config: LayerConfig) -> Tensor3:
    """Plain sliding-window convolution, CHW in, CHW out. The correctness
    oracle for every other primitive."""
    if t.layout != Layout.CHW:
        raise LayoutError(f"direct_conv expects chw input, got {t.layout.value}")
    _check_shapes(t, kernels, config)
    out = _run_direct(t.view(), kernels.view(), config)
    o = output_dims(config)
    return Tensor3(Layout.CHW, config.k, o, o, out.ravel())


def run_primitive(primitive_id: str, t: Tensor3, kernels: KernelSet,
                  config: LayerConfig) -> tuple[Tensor3, Layout]:
    """Run one registered primitive; returns the output tensor and its layout.

    The input must already be in the primitive's declared input layout; layout
    preparation is priced separately as a transformation cost.
    """
    spec = get_spec(primitive_id)
    if not spec.applicable(config):
        raise ApplicabilityError(
            f"{primitive_id} is not applicable to {config.as_tuple()}")
    if t.layout != spec.input_layout:
        raise LayoutError(
            f"{primitive_id} expects {spec.input_layout.value} input, "
            f"got {t.layout.value}")
    _check_shapes(t, kernels, config)
    arr = _RUNNERS[primitive_id](t.view(), kernels.view(), config)
    o = output_dims(config)
    want = spec.output_layout.shape(config.k, o)
    if arr.shape != want:
        raise ShapeError(f"{primitive_id} produced shape {arr.shape}, want {want}")
    result = Tensor3(spec.output_layout, config.k, o, o,
                     np.ascontiguousarray(arr).ravel())
    return result, spec.output_layout
