import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from primsel.core import (
    ApplicabilityError,
    LAYOUTS,
    LayerConfig,
    Layout,
    LayoutError,
    PRIMITIVE_IDS,
    ShapeError,
    get_spec,
)
from primsel.primitives import (
    KernelSet,
    Tensor3,
    cook_toom_matrices,
    direct_conv,
    random_input,
    random_kernels,
    run_primitive,
    transform_layout,
)


def sixloop_conv(x, ker, s):
    """Independent oracle: literal six nested loops in float64."""
    c, im, _ = x.shape
    k, _, f, _ = ker.shape
    o = (im - f) // s + 1
    out = np.zeros((k, o, o))
    for kk in range(k):
        for y in range(o):
            for xx in range(o):
                acc = 0.0
                for ch in range(c):
                    for fy in range(f):
                        for fx in range(f):
                            acc += float(x[ch, y * s + fy, xx * s + fx]) \
                                * float(ker[kk, ch, fy, fx])
                out[kk, y, xx] = acc
    return out


def rel_err(got, want):
    denom = max(1e-30, float(np.max(np.abs(want))))
    return float(np.max(np.abs(got - want))) / denom


def sample_applicable_config(spec, rng, im_max=16):
    while True:
        k = int(rng.integers(1, 7))
        c = int(rng.integers(1, 7))
        im = int(rng.integers(1, im_max))
        f = int(rng.choice([1, 3, 5, 7]))
        s = int(rng.choice([1, 2, 3]))
        if f > im or s > im:
            continue
        cfg = LayerConfig(k=k, c=c, im=im, f=f, s=s)
        if spec.applicable(cfg):
            return cfg


# ---------------------------------------------------------------------------
# direct_conv
# ---------------------------------------------------------------------------

def test_direct_conv_scalar_product():
    t = Tensor3(Layout.CHW, 1, 1, 1, np.array([3.0], dtype=np.float32))
    ker = KernelSet(1, 1, 1, np.array([4.0], dtype=np.float32))
    out = direct_conv(t, ker, LayerConfig(k=1, c=1, im=1, f=1, s=1))
    assert out.to_logical().tolist() == [[[12.0]]]


def test_direct_conv_all_ones():
    t = Tensor3(Layout.CHW, 1, 3, 3, np.ones(9, dtype=np.float32))
    ker = KernelSet(1, 1, 3, np.ones(9, dtype=np.float32))
    out = direct_conv(t, ker, LayerConfig(k=1, c=1, im=3, f=3, s=1))
    assert out.to_logical().tolist() == [[[9.0]]]


def test_direct_conv_counting_example():
    x = np.arange(1, 17, dtype=np.float32).reshape(1, 4, 4)
    t = Tensor3.from_logical(x, Layout.CHW)
    ker = KernelSet(1, 1, 3, np.ones(9, dtype=np.float32))
    out = direct_conv(t, ker, LayerConfig(k=1, c=1, im=4, f=3, s=1))
    assert out.to_logical()[0].tolist() == [[54.0, 63.0], [90.0, 99.0]]


def test_direct_conv_matches_sixloop_oracle():
    rng = np.random.default_rng(11)
    for _ in range(8):
        cfg = sample_applicable_config(get_spec("direct-sum2d"), rng, im_max=10)
        x = rng.standard_normal((cfg.c, cfg.im, cfg.im)).astype(np.float32)
        ker = rng.standard_normal((cfg.k, cfg.c, cfg.f, cfg.f)).astype(np.float32)
        out = direct_conv(Tensor3.from_logical(x, Layout.CHW),
                          KernelSet.from_array(ker), cfg)
        assert rel_err(out.to_logical(), sixloop_conv(x, ker, cfg.s)) < 1e-4


def test_direct_conv_shape_errors():
    cfg = LayerConfig(k=1, c=2, im=4, f=3, s=1)
    t = Tensor3(Layout.CHW, 1, 4, 4, np.zeros(16, dtype=np.float32))
    ker = KernelSet(1, 2, 3, np.zeros(18, dtype=np.float32))
    with pytest.raises(ShapeError):
        direct_conv(t, ker, cfg)  # c mismatch
    t2 = Tensor3(Layout.HWC, 2, 4, 4, np.zeros(32, dtype=np.float32))
    with pytest.raises(LayoutError):
        direct_conv(t2, ker, cfg)


# ---------------------------------------------------------------------------
# run_primitive vs the oracle
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("primitive_id", PRIMITIVE_IDS)
def test_primitive_matches_direct(primitive_id):
    spec = get_spec(primitive_id)
    rng = np.random.default_rng(hash(primitive_id) % 2 ** 32)
    for _ in range(10):
        cfg = sample_applicable_config(spec, rng)
        logical = rng.standard_normal((cfg.c, cfg.im, cfg.im)).astype(np.float32)
        ker = random_kernels(cfg, rng)
        t = Tensor3.from_logical(logical, spec.input_layout)
        out, layout = run_primitive(primitive_id, t, ker, cfg)
        assert layout == spec.output_layout
        assert out.layout == spec.output_layout
        want = direct_conv(Tensor3.from_logical(logical, Layout.CHW), ker, cfg)
        assert rel_err(out.to_logical(), want.to_logical()) < 1e-4, cfg


def test_winograd_3x3_small_instance():
    # c=1, k=1, im=4, f=3: one full output tile
    cfg = LayerConfig(k=1, c=1, im=4, f=3, s=1)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 4, 4)).astype(np.float32)
    ker = rng.standard_normal((1, 1, 3, 3)).astype(np.float32)
    out, _ = run_primitive("winograd-2x2-3x3",
                           Tensor3.from_logical(x, Layout.CHW),
                           KernelSet.from_array(ker), cfg)
    want = sixloop_conv(x, ker, 1)
    assert rel_err(out.to_logical(), want) < 1e-4


def test_winograd_partial_tiles():
    # odd output size exercises the direct fallback strips
    cfg = LayerConfig(k=2, c=3, im=7, f=3, s=1)  # o = 5
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 7, 7)).astype(np.float32)
    ker = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
    out, _ = run_primitive("winograd-2x2-3x3",
                           Tensor3.from_logical(x, Layout.CHW),
                           KernelSet.from_array(ker), cfg)
    assert rel_err(out.to_logical(), sixloop_conv(x, ker, 1)) < 1e-4


@pytest.mark.parametrize("f,primitive_id", [(3, "winograd-2x2-3x3"),
                                            (5, "winograd-2x2-5x5")])
def test_winograd_exact_on_linear_signal(f, primitive_id):
    # inputs linear in position are reproduced to float32 rounding levels
    cfg = LayerConfig(k=1, c=1, im=12, f=f, s=1)
    ys, xs = np.meshgrid(np.arange(12.0), np.arange(12.0), indexing="ij")
    x = (0.25 * ys + 0.5 * xs + 1.0)[None].astype(np.float32)
    rng = np.random.default_rng(8)
    ker = rng.standard_normal((1, 1, f, f)).astype(np.float32)
    out, _ = run_primitive(primitive_id,
                           Tensor3.from_logical(x, Layout.CHW),
                           KernelSet.from_array(ker), cfg)
    want = sixloop_conv(x, ker, 1)
    assert rel_err(out.to_logical(), want) < 5e-6


def test_strided_conv1x1_subsamples():
    cfg = LayerConfig(k=2, c=3, im=5, f=1, s=2)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((3, 5, 5)).astype(np.float32)
    ker = rng.standard_normal((2, 3, 1, 1)).astype(np.float32)
    out, _ = run_primitive("conv-1x1-gemm",
                           Tensor3.from_logical(x, Layout.CHW),
                           KernelSet.from_array(ker), cfg)
    assert rel_err(out.to_logical(), sixloop_conv(x, ker, 2)) < 1e-4


def test_run_primitive_errors():
    cfg = LayerConfig(k=1, c=1, im=8, f=3, s=2)
    rng = np.random.default_rng(0)
    t = random_input(cfg, Layout.CHW, rng)
    ker = random_kernels(cfg, rng)
    with pytest.raises(ApplicabilityError):
        run_primitive("kn2row", t, ker, cfg)  # kn2 needs s=1
    cfg1 = LayerConfig(k=1, c=1, im=8, f=3, s=1)
    hwc = random_input(cfg1, Layout.HWC, rng)
    with pytest.raises(LayoutError):
        run_primitive("kn2row", hwc, random_kernels(cfg1, rng), cfg1)


# ---------------------------------------------------------------------------
# Layout transformations
# ---------------------------------------------------------------------------

def test_transform_identity():
    t = Tensor3(Layout.CHW, 2, 3, 3, np.arange(18, dtype=np.float32))
    same = transform_layout(t, Layout.CHW)
    assert np.array_equal(same.data, t.data)


def test_transform_chw_to_hwc_hand_example():
    t = Tensor3(Layout.CHW, 2, 2, 2,
                np.array([0, 1, 2, 3, 4, 5, 6, 7], dtype=np.float32))
    hwc = transform_layout(t, Layout.HWC)
    assert hwc.data.tolist() == [0, 4, 1, 5, 2, 6, 3, 7]


def test_transform_roundtrip():
    rng = np.random.default_rng(3)
    t = Tensor3(Layout.CHW, 3, 4, 4, rng.standard_normal(48).astype(np.float32))
    back = transform_layout(transform_layout(t, Layout.HWC), Layout.CHW)
    assert np.array_equal(back.data, t.data)


def test_transform_index_permutation_oracle():
    rng = np.random.default_rng(4)
    t = Tensor3(Layout.CHW, 2, 3, 3, rng.standard_normal(18).astype(np.float32))
    for dst in LAYOUTS:
        moved = transform_layout(t, dst)
        for ch in range(2):
            for y in range(3):
                for x in range(3):
                    assert moved.at(ch, y, x) == t.at(ch, y, x)


@settings(max_examples=30)
@given(st.sampled_from(LAYOUTS), st.sampled_from(LAYOUTS),
       st.integers(1, 4), st.integers(1, 4), st.integers(0, 10 ** 6))
def test_transform_bijection_and_multiset(src, dst, c, im, seed):
    rng = np.random.default_rng(seed)
    t = Tensor3(src, c, im, im,
                rng.standard_normal(c * im * im).astype(np.float32))
    moved = transform_layout(t, dst)
    assert sorted(moved.data.tolist()) == sorted(t.data.tolist())
    back = transform_layout(moved, src)
    assert np.array_equal(back.data, t.data)


def test_tensor_validation():
    with pytest.raises(ShapeError):
        Tensor3(Layout.CHW, 1, 2, 3, np.zeros(6, dtype=np.float32))  # not square
    with pytest.raises(ShapeError):
        Tensor3(Layout.CHW, 2, 2, 2, np.zeros(7, dtype=np.float32))
    with pytest.raises(ShapeError):
        KernelSet(1, 1, 3, np.zeros(8, dtype=np.float32))


# ---------------------------------------------------------------------------
# Winograd transform construction
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("r", [3, 5])
def test_cook_toom_computes_correlation(r):
    at, g, bt = cook_toom_matrices(2, r)
    n = 2 + r - 1
    assert at.shape == (2, n) and g.shape == (n, r) and bt.shape == (n, n)
    rng = np.random.default_rng(r)
    for _ in range(20):
        d = rng.standard_normal(n)
        filt = rng.standard_normal(r)
        y = at @ ((g @ filt) * (bt @ d))
        want = np.array([float(np.dot(d[j:j + r], filt)) for j in range(2)])
        assert np.max(np.abs(y - want)) < 1e-10


def test_cook_toom_f23_matches_published_result():
    # F(2,3) must reproduce the classic 4-multiplication algorithm's output
    at, g, bt = cook_toom_matrices(2, 3)
    d = np.array([1.0, 2.0, 3.0, 4.0])
    filt = np.array([1.0, 1.0, 1.0])
    y = at @ ((g @ filt) * (bt @ d))
    assert np.allclose(y, [6.0, 9.0])
