import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from primsel.core import (
    DomainError,
    EmptyMaskError,
    LayerConfig,
    SizeError,
)
from primsel.perfmodel import (
    DLT_OUTPUTS,
    Mlp,
    Nn1Ensemble,
    SplitDataset,
    TrainConfig,
    dataset_arrays,
    dlt_arrays,
    evaluate_mdrae,
    fit_linear,
    fit_normalizer,
    load_model,
    masked_mse,
    mdrae,
    predict_costs,
    predict_dlt,
    save_model,
    split_dataset,
    train_model,
    training_loss,
)
from primsel.profiler import DltRecord, ProfileDataset, ProfileRecord
from conftest import synthetic_dataset


# ---------------------------------------------------------------------------
# Normalizer
# ---------------------------------------------------------------------------

def test_fit_normalizer_exact_values():
    values = np.array([[1.0], [np.e ** 2], [np.e ** 4]])
    norm = fit_normalizer(values)
    assert norm.mean[0] == pytest.approx(2.0)
    assert norm.std[0] == pytest.approx(np.sqrt(8.0 / 3.0))
    normalized = norm.apply(values)[:, 0]
    assert normalized == pytest.approx([-1.224745, 0.0, 1.224745], abs=1e-5)


def test_fit_normalizer_constant_column_guard():
    values = np.full((3, 1), np.e)
    norm = fit_normalizer(values)
    assert norm.std[0] == 1.0
    assert np.allclose(norm.apply(values), 0.0)


def test_fit_normalizer_rejects_nonpositive():
    with pytest.raises(DomainError):
        fit_normalizer(np.array([[1.0], [0.0]]))
    with pytest.raises(DomainError):
        fit_normalizer(np.array([[1.0], [-3.0]]))


@settings(max_examples=40)
@given(st.lists(st.floats(1e-9, 1e9), min_size=2, max_size=20),
       st.floats(1e-9, 1e9))
def test_normalizer_roundtrip(values, probe):
    norm = fit_normalizer(np.array(values)[:, None])
    x = np.array([[probe]])
    back = norm.invert(norm.apply(x))
    assert back[0, 0] == pytest.approx(probe, rel=1e-9)


# ---------------------------------------------------------------------------
# Masked loss
# ---------------------------------------------------------------------------

def test_masked_mse_example():
    loss, grad = masked_mse(np.array([1.0, 2.0, 3.0]),
                            np.array([1.0, 4.0, 0.0]),
                            np.array([1.0, 1.0, 0.0]))
    assert loss == pytest.approx(2.0)
    assert grad[2] == 0.0
    assert grad[1] == pytest.approx(2 * (2 - 4) / 2)


def test_masked_mse_full_mask_is_plain_mse():
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=6), rng.normal(size=6)
    loss, _ = masked_mse(p, t, np.ones(6))
    assert loss == pytest.approx(float(np.mean((p - t) ** 2)))


def test_masked_mse_empty_mask():
    with pytest.raises(EmptyMaskError):
        masked_mse(np.ones(3), np.ones(3), np.zeros(3))


def test_masked_gradient_exactly_zero():
    _, grad = masked_mse(np.array([5.0, 7.0]), np.array([0.0, 1.0]),
                         np.array([0.0, 1.0]))
    assert grad[0] == 0.0


# ---------------------------------------------------------------------------
# MdRAE
# ---------------------------------------------------------------------------

def test_mdrae_examples():
    assert mdrae(np.array([2.0, 3.0]), np.array([2.0, 3.0])) == 0.0
    assert mdrae(np.array([1.1, 2.0, 4.5]), np.array([1.0, 2.0, 5.0])) \
        == pytest.approx(0.1)
    assert mdrae(np.array([3.0]), np.array([2.0])) == pytest.approx(0.5)


def test_mdrae_even_length_lower_middle():
    # rel errors {0.1, 0.2, 0.3, 0.4} -> lower middle 0.2
    pred = np.array([1.1, 1.2, 1.3, 1.4])
    truth = np.ones(4)
    assert mdrae(pred, truth) == pytest.approx(0.2)


def test_mdrae_errors():
    with pytest.raises(SizeError):
        mdrae(np.array([]), np.array([]))
    with pytest.raises(DomainError):
        mdrae(np.array([1.0]), np.array([0.0]))
    with pytest.raises(SizeError):
        mdrae(np.array([1.0, 2.0]), np.array([1.0]))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def test_split_sizes():
    ds = synthetic_dataset(100, seed=1)
    sp = split_dataset(ds, seed=0)
    assert (len(sp.train), len(sp.validation), len(sp.test)) == (80, 10, 10)
    tiny = split_dataset(synthetic_dataset(10, seed=2), seed=0)
    assert (len(tiny.train), len(tiny.validation), len(tiny.test)) == (8, 1, 1)


def test_split_disjoint_union_and_determinism():
    ds = synthetic_dataset(53, seed=3)
    sp1 = split_dataset(ds, seed=9)
    sp2 = split_dataset(ds, seed=9)
    keys = lambda part: [r.config.as_tuple() for r in part.records]
    assert keys(sp1.train) == keys(sp2.train)
    assert keys(sp1.validation) == keys(sp2.validation)
    assert keys(sp1.test) == keys(sp2.test)
    all_keys = keys(sp1.train) + keys(sp1.validation) + keys(sp1.test)
    assert sorted(all_keys) == sorted(keys(ds))


def test_split_too_small():
    with pytest.raises(SizeError):
        split_dataset(synthetic_dataset(9, seed=0), seed=0)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def _relu_margin(net, x):
    h = np.asarray(x, dtype=np.float64)
    margin = np.inf
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        z = h @ w.T + b
        margin = min(margin, float(np.min(np.abs(z))))
        h = np.maximum(z, 0.0)
    return margin


def gradcheck_once(seed, sizes=(3, 6, 5, 2)):
    rng = np.random.default_rng(seed)
    net = Mlp.init(sizes, rng)
    x = rng.normal(size=(4, sizes[0]))
    while _relu_margin(net, x) < 1e-3:  # differentiable point only
        x = rng.normal(size=(4, sizes[0]))
    y = rng.normal(size=(4, sizes[-1]))
    mask = (rng.uniform(size=y.shape) > 0.4).astype(float)
    if mask.sum() == 0:
        mask[0, 0] = 1.0
    acts = net.forward_acts(x)
    _, dout = masked_mse(acts[-1], y, mask)
    gw, gb = net.backward(acts, dout)

    def loss_at():
        loss, _ = masked_mse(net.forward(x), y, mask)
        return loss

    h = 1e-5
    worst = 0.0
    for l in range(len(net.weights)):
        for arr, grad in ((net.weights[l], gw[l]), (net.biases[l], gb[l])):
            flat = arr.ravel()
            gflat = grad.ravel()
            idx = rng.choice(flat.size, size=min(12, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                hi = loss_at()
                flat[i] = orig - h
                lo = loss_at()
                flat[i] = orig
                fd = (hi - lo) / (2 * h)
                err = abs(gflat[i] - fd) / max(abs(fd), 1e-4)
                worst = max(worst, err)
    return worst


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    assert gradcheck_once(seed) < 1e-4


def test_fully_masked_output_has_zero_weight_gradient():
    rng = np.random.default_rng(4)
    net = Mlp.init([3, 4, 2], rng)
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=(5, 2))
    mask = np.zeros((5, 2))
    mask[:, 0] = 1.0  # output column 1 never defined
    acts = net.forward_acts(x)
    _, dout = masked_mse(acts[-1], y, mask)
    gw, gb = net.backward(acts, dout)
    assert np.all(gw[-1][1, :] == 0.0)
    assert gb[-1][1] == 0.0


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def overfit_split(n=10, seed=0):
    ds = synthetic_dataset(n, seed=seed)
    return SplitDataset(ds, ds, ds)


def test_overfit_small_dataset():
    cfg = TrainConfig(learning_rate=0.001, weight_decay=1e-5, batch_size=1024,
                      patience=5000, seed=0, max_updates=4000)
    model = train_model("nn2", overfit_split(), cfg)
    assert training_loss(model, model_train_ds(model)) < 1e-3


def model_train_ds(model, n=10, seed=0):
    return synthetic_dataset(n, seed=seed)


def test_training_is_deterministic():
    ds = synthetic_dataset(40, seed=5)
    split = split_dataset(ds, seed=1)
    cfg = TrainConfig(learning_rate=0.003, batch_size=1024, patience=30,
                      seed=11, max_updates=120)
    m1 = train_model("nn1", split, cfg, target="synth")
    m2 = train_model("nn1", split, cfg, target="synth")
    for w1, w2 in zip(m1.net.weights, m2.net.weights):
        assert np.array_equal(w1, w2)
    for b1, b2 in zip(m1.net.biases, m2.net.biases):
        assert np.array_equal(b1, b2)


def test_architectures_match_contract():
    ds = synthetic_dataset(40, seed=6)
    split = split_dataset(ds, seed=0)
    cfg = TrainConfig(patience=5, max_updates=10, seed=0)
    nn2 = train_model("nn2", split, cfg)
    assert nn2.net.sizes == [5, 128, 512, 512, 128, 1]
    nn1 = train_model("nn1", split, cfg, target="synth")
    assert nn1.net.sizes == [5, 16, 64, 64, 16, 1]


def test_masked_column_neutrality():
    base = synthetic_dataset(40, seed=7)
    cfg = TrainConfig(patience=20, max_updates=80, seed=3)
    split_a = split_dataset(base, seed=2)
    model_a = train_model("nn2", split_a, cfg)

    # same data plus one never-defined primitive column
    padded = ProfileDataset(base.primitives + ["ghost"],
                            [ProfileRecord(r.config, dict(r.times))
                             for r in base.records])
    split_b = split_dataset(padded, seed=2)
    model_b = train_model("nn2", split_b, cfg)

    configs = [r.config for r in base.records[:8]]
    pa = predict_costs(model_a, configs)
    pb = predict_costs(model_b, configs)
    ja = pa.columns.index("synth")
    jb = pb.columns.index("synth")
    assert np.array_equal(pa.values[:, ja], pb.values[:, jb])


def test_normalizers_fitted_on_train_partition_only():
    ds = synthetic_dataset(60, seed=21)
    split = split_dataset(ds, seed=4)
    cfg = TrainConfig(patience=5, max_updates=10, seed=0)
    model = train_model("nn2", split, cfg)
    x_raw, y_raw, m = dataset_arrays(split.train)
    want_in = fit_normalizer(x_raw)
    want_out = fit_normalizer(y_raw, m)
    assert np.array_equal(model.in_norm.mean, want_in.mean)
    assert np.array_equal(model.in_norm.std, want_in.std)
    assert np.array_equal(model.out_norm.mean, want_out.mean)
    assert np.array_equal(model.out_norm.std, want_out.std)


def test_early_stopping_tracks_best_validation():
    ds = synthetic_dataset(60, seed=8)
    split = split_dataset(ds, seed=0)
    cfg = TrainConfig(learning_rate=0.003, patience=40, seed=1, max_updates=400)
    model = train_model("nn2", split, cfg)
    overall, _ = evaluate_mdrae(model, split.validation)
    assert overall == pytest.approx(model.train_echo["best_val_mdrae"], rel=1e-9)


def test_divergence_raises():
    ds = synthetic_dataset(30, seed=9)
    split = split_dataset(ds, seed=0)
    cfg = TrainConfig(learning_rate=1e30, patience=50, seed=0, max_updates=200)
    from primsel.core import TrainingDivergedError
    with pytest.raises(TrainingDivergedError):
        train_model("nn2", split, cfg)


# ---------------------------------------------------------------------------
# Linear baseline
# ---------------------------------------------------------------------------

def test_linear_exact_on_log_linear_targets():
    # the default oracle is a pure product: exactly linear in the log domain
    ds = synthetic_dataset(120, seed=10, noise=0.0)
    split = split_dataset(ds, seed=0)
    model = fit_linear(split)
    x_raw, y_raw, m = dataset_arrays(split.train)
    pred = model.predict_raw(x_raw)
    resid = np.abs(np.log(pred[m]) - np.log(y_raw[m]))
    assert np.max(resid) < 1e-8


def test_linear_good_on_multiplicative_oracle():
    ds = synthetic_dataset(400, seed=11, noise=0.01)
    split = split_dataset(ds, seed=0)
    model = fit_linear(split)
    overall, _ = evaluate_mdrae(model, split.test)
    assert overall <= 0.05


def test_linear_singular_design_fallback():
    # constant stride column makes the normalized design rank deficient
    records = []
    rng = np.random.default_rng(12)
    for _ in range(30):
        k = int(rng.integers(2, 50))
        cfg = LayerConfig(k=k, c=4, im=16, f=3, s=1)
        records.append(ProfileRecord(cfg, {"synth": 1e-6 * k}))
    ds = ProfileDataset(["synth"], records)
    split = split_dataset(ds, seed=0)
    model = fit_linear(split)  # must not raise
    pred = model.predict_raw(np.array([[10.0, 4.0, 16.0, 3.0, 1.0]]))
    assert pred[0, 0] > 0


# ---------------------------------------------------------------------------
# Prediction surfaces
# ---------------------------------------------------------------------------

def test_predictions_positive_and_masked(trained_tiny_model):
    model = trained_tiny_model
    configs = [LayerConfig(k=4, c=4, im=14, f=3, s=1),
               LayerConfig(k=2, c=8, im=9, f=1, s=2)]
    table = predict_costs(model, configs)
    assert table.values.shape == (2, len(model.outputs))
    assert np.all(table.values[table.defined] > 0)


@pytest.fixture(scope="module")
def trained_tiny_model():
    ds = synthetic_dataset(40, seed=13)
    cfg = TrainConfig(patience=10, max_updates=30, seed=0)
    return train_model("nn2", split_dataset(ds, seed=0), cfg)


def test_predict_costs_leaves_inapplicable_undefined():
    # dataset over the real primitive registry
    from primsel.core import PRIMITIVE_IDS, applicable
    cost_fns = {p: (lambda cfg, i=i: 1e-7 * cfg.k * cfg.c * (i + 1))
                for i, p in enumerate(PRIMITIVE_IDS)}
    rng = np.random.default_rng(14)
    records = []
    for _ in range(40):
        k = int(rng.integers(1, 64))
        c = int(rng.integers(1, 64))
        im = int(rng.integers(7, 40))
        f = int(rng.choice([1, 3, 5]))
        s = int(rng.choice([1, 2]))
        cfgo = LayerConfig(k=k, c=c, im=im, f=f, s=s)
        times = {p: cost_fns[p](cfgo) for p in PRIMITIVE_IDS
                 if applicable(p, cfgo)}
        records.append(ProfileRecord(cfgo, times))
    ds = ProfileDataset(list(PRIMITIVE_IDS), records)
    model = train_model("nn2", split_dataset(ds, seed=0),
                        TrainConfig(patience=5, max_updates=10, seed=0))
    probe = LayerConfig(k=3, c=3, im=9, f=5, s=1)
    table = predict_costs(model, [probe])
    j3 = table.columns.index("winograd-2x2-3x3")
    j5 = table.columns.index("winograd-2x2-5x5")
    assert not table.defined[0, j3]
    assert table.defined[0, j5]


def test_model_json_roundtrip(tmp_path, trained_tiny_model):
    p1 = tmp_path / "m1.json"
    p2 = tmp_path / "m2.json"
    save_model(trained_tiny_model, str(p1))
    loaded = load_model(str(p1))
    save_model(loaded, str(p2))
    assert p1.read_bytes() == p2.read_bytes()
    cfgs = [LayerConfig(k=3, c=3, im=10, f=3, s=1)]
    assert np.array_equal(predict_costs(trained_tiny_model, cfgs).values,
                          predict_costs(loaded, cfgs).values)


def test_nn1_ensemble_roundtrip(tmp_path):
    ds = synthetic_dataset(40, seed=15)
    split = split_dataset(ds, seed=0)
    cfg = TrainConfig(patience=5, max_updates=10, seed=0)
    ens = Nn1Ensemble([train_model("nn1", split, cfg, target="synth")])
    path = tmp_path / "ens.json"
    save_model(ens, str(path))
    loaded = load_model(str(path))
    assert isinstance(loaded, Nn1Ensemble)
    assert loaded.outputs == ["synth"]
    cfgs = [LayerConfig(k=3, c=3, im=10, f=3, s=1)]
    assert np.array_equal(predict_costs(ens, cfgs).values,
                          predict_costs(loaded, cfgs).values)


# ---------------------------------------------------------------------------
# Layout-transform model
# ---------------------------------------------------------------------------

def synthetic_dlt_records(n, seed=0):
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        c = int(rng.integers(1, 256))
        im = int(rng.integers(7, 128))
        base = 2e-9 * c * im * im
        mat = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                if i != j:
                    mat[i, j] = base * (1 + 0.1 * i + 0.05 * j) \
                        * (1 + 0.01 * float(rng.uniform(-1, 1)))
        records.append(DltRecord(c, im, mat))
    return records


def test_dlt_arrays_mask_diagonal():
    recs = synthetic_dlt_records(4)
    x, y, m = dlt_arrays(recs)
    assert x.shape == (4, 2) and y.shape == (4, 9)
    assert not m[:, 0].any() and not m[:, 4].any() and not m[:, 8].any()
    assert m[:, 1].all()


def test_dlt_model_trains_and_predicts_zero_diagonal():
    recs = synthetic_dlt_records(60, seed=16)
    split = split_dataset(recs, seed=0)
    cfg = TrainConfig(learning_rate=0.001, weight_decay=1e-5,
                      patience=100, seed=0, max_updates=600)
    model = train_model("dlt", split, cfg)
    assert model.net.sizes == [2, 32, 128, 32, 9]
    assert model.outputs == list(DLT_OUTPUTS)
    mats = predict_dlt(model, [(32, 16), (8, 64)])
    assert len(mats) == 2
    for m in mats:
        assert m.shape == (3, 3)
        assert np.all(np.diag(m) == 0.0)
        assert np.all(m[~np.eye(3, dtype=bool)] > 0)
