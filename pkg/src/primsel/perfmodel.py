"""Execution-time predictors: a multi-output MLP (one network for all
primitives), per-primitive MLPs, a linear baseline, and the layout-transform
cost network, together with log-domain standardization, the masked MSE loss,
and the MdRAE accuracy metric.

Targets can be undefined (a primitive that does not apply to a configuration);
those entries are masked out of both the loss value and the gradients, so they
never influence training.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    CompatibilityError,
    DomainError,
    EmptyMaskError,
    LAYOUTS,
    LayerConfig,
    SizeError,
    TrainingDivergedError,
    UnknownPrimitiveError,
    applicable,
)
from .profiler import DltRecord, ProfileDataset

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

NN1_HIDDEN = (16, 64, 64, 16)
NN2_HIDDEN = (128, 512, 512, 128)
DLT_HIDDEN = (32, 128, 32)

# Transform-cost column names, row-major over (from, to) layouts.
DLT_OUTPUTS = tuple(f"{a.value}>{b.value}" for a in LAYOUTS for b in LAYOUTS)
_DLT_DIAGONAL = tuple(i * 3 + i for i in range(3))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

@dataclass
class Normalizer:
    """Per-dimension standardization in the natural-log domain."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if np.any(x <= 0):
            raise DomainError("normalizer input must be strictly positive")
        return (np.log(x) - self.mean) / self.std

    def invert(self, y: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(np.asarray(y, dtype=np.float64) * self.std + self.mean)


def fit_normalizer(values: np.ndarray, mask: np.ndarray | None = None) -> Normalizer:
    """Fit log-domain mean and population std per column.

    `mask` marks which entries are defined; a column with no defined entries
    (or zero variance) gets neutral statistics so it stays harmless.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    m = np.ones(v.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != v.shape:
        raise SizeError(f"mask shape {m.shape} does not match values {v.shape}")
    if np.any(v[m] <= 0):
        raise DomainError("normalizer requires strictly positive values")
    d = v.shape[1]
    mean = np.zeros(d)
    std = np.ones(d)
    logv = np.zeros_like(v)
    np.log(v, out=logv, where=m)
    for j in range(d):
        col = logv[m[:, j], j]
        if col.size == 0:
            continue
        mean[j] = col.mean()
        sj = col.std()  # population std
        std[j] = sj if sj > 1e-12 else 1.0
    return Normalizer(mean, std)


# ---------------------------------------------------------------------------
# Loss and metric
# ---------------------------------------------------------------------------

def masked_mse(pred: np.ndarray, target: np.ndarray,
               mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over masked-in entries, plus its gradient w.r.t.
    pred. Masked-out entries contribute zero error and exactly zero gradient."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if p.shape != t.shape or p.shape != m.shape:
        raise SizeError(
            f"pred/target/mask shapes differ: {p.shape} {t.shape} {m.shape}")
    count = m.sum()
    if count == 0:
        raise EmptyMaskError("masked loss with no unmasked entries")
    diff = (p - t) * m
    loss = float(np.sum(diff * diff) / count)
    grad = 2.0 * diff / count
    return loss, grad


def mdrae(pred: np.ndarray, truth: np.ndarray) -> float:
    """Median relative absolute error |pred - truth| / truth; lower-middle
    element for even lengths."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size != t.size:
        raise SizeError(f"pred and truth lengths differ: {p.size} vs {t.size}")
    if p.size == 0:
        raise SizeError("mdrae of empty vectors")
    if np.any(t <= 0):
        raise DomainError("mdrae requires strictly positive truths")
    rel = np.abs(p - t) / t
    return float(np.sort(rel)[(rel.size - 1) // 2])


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass
class Mlp:
    """Fully connected network; rectifier on hidden layers, identity output.
    Weight matrices are (fan_out, fan_in) float64.

    The output layer is computed column by column (and back-propagated by
    ordered per-column accumulation) so that output columns are numerically
    independent: appending an always-masked column under the same seed leaves
    every other column's trajectory bit-identical, which whole-matrix BLAS
    calls do not guarantee."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator) -> "Mlp":
        # Row-major per-output draws keep existing output columns' weights
        # unchanged when extra outputs are appended under the same seed.
        weights = []
        biases = []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])

    def _affine_out(self, h: np.ndarray) -> np.ndarray:
        w, b = self.weights[-1], self.biases[-1]
        out = np.empty((h.shape[0], w.shape[0]))
        for j in range(w.shape[0]):
            out[:, j] = h @ w[j] + b[j]
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = h @ w.T + b
            np.maximum(h, 0.0, out=h)
        return self._affine_out(h)

    def forward_acts(self, x: np.ndarray) -> list[np.ndarray]:
        acts = [np.asarray(x, dtype=np.float64)]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = acts[-1] @ w.T + b
            np.maximum(h, 0.0, out=h)
            acts.append(h)
        acts.append(self._affine_out(acts[-1]))
        return acts

    def backward(self, acts: list[np.ndarray],
                 dout: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Gradients of a scalar loss w.r.t. weights and biases, given the
        activations from forward_acts and the loss gradient at the output."""
        grads_w: list[np.ndarray] = [None] * len(self.weights)  # type: ignore
        grads_b: list[np.ndarray] = [None] * len(self.biases)  # type: ignore
        delta = np.asarray(dout, dtype=np.float64)
        last = len(self.weights) - 1
        w_last = self.weights[last]
        gw = np.empty_like(w_last)
        cols = [np.ascontiguousarray(delta[:, j]) for j in range(w_last.shape[0])]
        for j, col in enumerate(cols):
            gw[j] = col @ acts[last]
        grads_w[last] = gw
        grads_b[last] = np.array([col.sum() for col in cols])
        if last > 0:
            dh = np.zeros_like(acts[last])
            for j, col in enumerate(cols):
                dh += col[:, None] * w_last[j]
            delta = dh * (acts[last] > 0)
        for l in range(last - 1, -1, -1):
            grads_w[l] = delta.T @ acts[l]
            grads_b[l] = delta.sum(axis=0)
            if l > 0:
                delta = (delta @ self.weights[l]) * (acts[l] > 0)
        return grads_w, grads_b


# ---------------------------------------------------------------------------
# Training configuration and dataset splits
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Adam hyperparameters and early-stopping policy."""

    learning_rate: float = 0.001
    weight_decay: float = 0.0
    batch_size: int = 1024
    patience: int = 250
    seed: int = 0
    max_updates: int | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DomainError("learning rate must be positive")
        if self.patience < 1:
            raise DomainError("patience must be >= 1")


def nn2_config(seed: int = 0, **overrides) -> TrainConfig:
    base = dict(learning_rate=0.001, weight_decay=1e-5, seed=seed)
    base.update(overrides)
    return TrainConfig(**base)


def nn1_config(seed: int = 0, **overrides) -> TrainConfig:
    base = dict(learning_rate=0.003, weight_decay=0.0, seed=seed)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class SplitDataset:
    """Train/validation/test partitions. split_dataset produces the canonical
    shuffled 80/10/10 partition; experiment code may assemble its own."""

    train: object
    validation: object
    test: object


def split_dataset(ds, seed: int = 0) -> SplitDataset:
    """Seeded shuffle, then 80/10/10: train floor(0.8n), validation
    floor(0.1n), test the remainder."""
    records = ds.records if isinstance(ds, ProfileDataset) else list(ds)
    n = len(records)
    if n < 10:
        raise SizeError(f"dataset too small to split: {n} records (need >= 10)")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    idx_train = perm[:n_train]
    idx_val = perm[n_train:n_train + n_val]
    idx_test = perm[n_train + n_val:]
    if isinstance(ds, ProfileDataset):
        return SplitDataset(ds.subset(idx_train), ds.subset(idx_val),
                            ds.subset(idx_test))
    pick = lambda idx: [records[i] for i in idx]
    return SplitDataset(pick(idx_train), pick(idx_val), pick(idx_test))


# ---------------------------------------------------------------------------
# Dataset -> arrays
# ---------------------------------------------------------------------------

def dataset_arrays(ds: ProfileDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(X raw (n,5), Y raw (n,p), defined mask (n,p)) for a profile dataset.
    Undefined target cells hold 1.0 so logs stay finite; the mask excludes
    them from every computation."""
    n, p = len(ds.records), len(ds.primitives)
    x = np.empty((n, 5))
    y = np.ones((n, p))
    m = np.zeros((n, p), dtype=bool)
    col = {prim: j for j, prim in enumerate(ds.primitives)}
    for i, rec in enumerate(ds.records):
        x[i] = rec.config.as_tuple()
        for prim, t in rec.times.items():
            j = col[prim]
            y[i, j] = t
            m[i, j] = True
    return x, y, m


def dlt_arrays(records: Sequence[DltRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(X raw (n,2), Y raw (n,9), mask) for transform records; the diagonal
    (identity transforms, cost 0) is always masked out."""
    n = len(records)
    x = np.empty((n, 2))
    y = np.ones((n, 9))
    m = np.ones((n, 9), dtype=bool)
    m[:, list(_DLT_DIAGONAL)] = False
    for i, rec in enumerate(records):
        x[i] = (rec.c, rec.im)
        flat = rec.matrix.ravel()
        for j in range(9):
            if j not in _DLT_DIAGONAL:
                y[i, j] = flat[j]
    return x, y, m


# ---------------------------------------------------------------------------
# Model container and persistence
# ---------------------------------------------------------------------------

@dataclass
class PerfModel:
    """A trained predictor plus its normalizers and output column names."""

    kind: str                    # nn1 | nn2 | dlt | linear
    outputs: list[str]
    net: Mlp
    in_norm: Normalizer
    out_norm: Normalizer
    train_echo: dict = field(default_factory=dict)

    @property
    def n_inputs(self) -> int:
        return self.net.sizes[0]

    def predict_raw(self, x_raw: np.ndarray) -> np.ndarray:
        """Predictions in linear seconds for raw feature rows."""
        xn = self.in_norm.apply(np.asarray(x_raw, dtype=np.float64))
        return self.out_norm.invert(self.net.forward(xn))

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "outputs": list(self.outputs),
            "sizes": self.net.sizes,
            "weights": [w.ravel().tolist() for w in self.net.weights],
            "biases": [b.tolist() for b in self.net.biases],
            "in_norm": {"mean": self.in_norm.mean.tolist(),
                        "std": self.in_norm.std.tolist()},
            "out_norm": {"mean": self.out_norm.mean.tolist(),
                         "std": self.out_norm.std.tolist()},
            "train": self.train_echo,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PerfModel":
        sizes = obj["sizes"]
        weights = [np.asarray(w, dtype=np.float64).reshape(o, i)
                   for w, i, o in zip(obj["weights"], sizes, sizes[1:])]
        biases = [np.asarray(b, dtype=np.float64) for b in obj["biases"]]
        return cls(
            kind=obj["kind"],
            outputs=list(obj["outputs"]),
            net=Mlp(weights, biases),
            in_norm=Normalizer(np.asarray(obj["in_norm"]["mean"]),
                               np.asarray(obj["in_norm"]["std"])),
            out_norm=Normalizer(np.asarray(obj["out_norm"]["mean"]),
                                np.asarray(obj["out_norm"]["std"])),
            train_echo=obj.get("train", {}),
        )


@dataclass
class Nn1Ensemble:
    """Per-primitive single-output models presented behind one predict
    interface; column order follows the member order."""

    models: list[PerfModel]

    @property
    def outputs(self) -> list[str]:
        return [m.outputs[0] for m in self.models]


def save_model(model: PerfModel | Nn1Ensemble, path: str) -> None:
    if isinstance(model, Nn1Ensemble):
        obj: dict = {"kind": "nn1-ensemble",
                     "models": [m.to_json() for m in model.models]}
    else:
        obj = model.to_json()
    with open(path, "w") as fh:
        json.dump(obj, fh)
        fh.write("\n")


def load_model(path: str) -> PerfModel | Nn1Ensemble:
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("kind") == "nn1-ensemble":
        return Nn1Ensemble([PerfModel.from_json(m) for m in obj["models"]])
    return PerfModel.from_json(obj)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def training_loss(model: PerfModel, ds) -> float:
    """Masked MSE of the model on a dataset, in normalized units (data term
    only, no weight decay)."""
    x_raw, y_raw, m = _arrays_for_kind(model.kind, ds)
    if model.kind != "dlt" and list(ds.primitives) != list(model.outputs):
        cols = [ds.primitives.index(o) for o in model.outputs]
        y_raw, m = y_raw[:, cols], m[:, cols]
    xn = model.in_norm.apply(x_raw)
    yn = _normalized_targets(model.out_norm, y_raw, m)
    loss, _ = masked_mse(model.net.forward(xn), yn, m)
    return loss


def _arrays_for_kind(kind: str, ds):
    if kind == "dlt":
        return dlt_arrays(ds)
    return dataset_arrays(ds)


def _normalized_targets(out_norm: Normalizer, y_raw, mask):
    yn = np.zeros(np.asarray(y_raw).shape)
    logy = np.zeros_like(yn)
    np.log(np.asarray(y_raw, dtype=np.float64), out=logy, where=np.asarray(mask))
    yn[mask] = ((logy - out_norm.mean) / out_norm.std)[mask]
    return yn


def run_training_loop(net: Mlp, xtr: np.ndarray, ytr: np.ndarray, mtr: np.ndarray,
                      xva: np.ndarray, yva_lin: np.ndarray, mva: np.ndarray,
                      out_norm: Normalizer, cfg: TrainConfig,
                      learning_rate: float | None = None) -> dict:
    """Adam with early stopping on validation MdRAE; mutates `net` and leaves
    it at the best-validation weights. Returns a summary dict.

    xtr/xva are normalized inputs; ytr is normalized (masked cells zero);
    yva_lin holds linear-domain validation targets for the metric.
    """
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    if mtr.sum() == 0:
        raise EmptyMaskError("training partition has no defined targets")
    if mva.sum() == 0:
        raise SizeError("validation partition has no defined targets")
    rng = np.random.default_rng(cfg.seed)
    n = xtr.shape[0]
    mw = [np.zeros_like(w) for w in net.weights]
    vw = [np.zeros_like(w) for w in net.weights]
    mb = [np.zeros_like(b) for b in net.biases]
    vb = [np.zeros_like(b) for b in net.biases]
    step = 0
    best_val = np.inf
    best_weights = net.copy()
    since_best = 0
    stop = False
    # overflow on the way to the explicit divergence check is expected noise
    with np.errstate(over="ignore", invalid="ignore"):
        while not stop:
            perm = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = perm[start:start + cfg.batch_size]
                acts = net.forward_acts(xtr[batch])
                loss, dout = masked_mse(acts[-1], ytr[batch], mtr[batch])
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"loss became non-finite at update {step}")
                gw, gb = net.backward(acts, dout)
                if cfg.weight_decay > 0:
                    for g, w in zip(gw, net.weights):
                        g += 2.0 * cfg.weight_decay * w
                step += 1
                b1c = 1.0 - ADAM_BETA1 ** step
                b2c = 1.0 - ADAM_BETA2 ** step
                for i in range(len(net.weights)):
                    mw[i] = ADAM_BETA1 * mw[i] + (1 - ADAM_BETA1) * gw[i]
                    vw[i] = ADAM_BETA2 * vw[i] + (1 - ADAM_BETA2) * gw[i] ** 2
                    net.weights[i] -= lr * (mw[i] / b1c) / (np.sqrt(vw[i] / b2c) + ADAM_EPS)
                    mb[i] = ADAM_BETA1 * mb[i] + (1 - ADAM_BETA1) * gb[i]
                    vb[i] = ADAM_BETA2 * vb[i] + (1 - ADAM_BETA2) * gb[i] ** 2
                    net.biases[i] -= lr * (mb[i] / b1c) / (np.sqrt(vb[i] / b2c) + ADAM_EPS)
                val_pred = out_norm.invert(net.forward(xva))
                val = mdrae(val_pred[mva], yva_lin[mva])
                if val < best_val:
                    best_val = val
                    best_weights = net.copy()
                    since_best = 0
                else:
                    since_best += 1
                if since_best >= cfg.patience:
                    stop = True
                    break
                if cfg.max_updates is not None and step >= cfg.max_updates:
                    stop = True
                    break
    net.weights = best_weights.weights
    net.biases = best_weights.biases
    return {"updates": step, "best_val_mdrae": float(best_val)}


def _hidden_for_kind(kind: str) -> tuple[int, ...]:
    return {"nn1": NN1_HIDDEN, "nn2": NN2_HIDDEN, "dlt": DLT_HIDDEN}[kind]


def train_model(kind: str, split: SplitDataset, cfg: TrainConfig,
                target: str | None = None) -> PerfModel:
    """Train one predictor.

    kind "nn2": one network, all primitive columns, masked loss.
    kind "nn1": one single-output network for `target` (rows where that
        primitive is undefined are dropped).
    kind "dlt": transform-cost network over (c, im) inputs, 9 outputs with the
        identity transforms masked out.
    kind "linear": delegates to fit_linear.
    """
    kind = kind.lower()
    if kind == "linear":
        return fit_linear(split)
    if kind not in ("nn1", "nn2", "dlt"):
        raise CompatibilityError(f"unknown model kind {kind!r}")

    xtr_raw, ytr_raw, mtr = _arrays_for_kind(kind, split.train)
    xva_raw, yva_raw, mva = _arrays_for_kind(kind, split.validation)
    if kind == "dlt":
        outputs = list(DLT_OUTPUTS)
    else:
        outputs = list(split.train.primitives)

    if kind == "nn1":
        if target is None:
            raise UnknownPrimitiveError("nn1 training needs a designated primitive")
        if target not in outputs:
            raise UnknownPrimitiveError(f"{target!r} not a dataset column")
        j = outputs.index(target)
        keep_tr = mtr[:, j]
        keep_va = mva[:, j]
        xtr_raw, ytr_raw, mtr = xtr_raw[keep_tr], ytr_raw[keep_tr][:, [j]], mtr[keep_tr][:, [j]]
        xva_raw, yva_raw, mva = xva_raw[keep_va], yva_raw[keep_va][:, [j]], mva[keep_va][:, [j]]
        outputs = [target]
        if len(xtr_raw) == 0:
            raise SizeError(f"no training rows define primitive {target!r}")

    in_norm = fit_normalizer(xtr_raw)
    out_norm = fit_normalizer(ytr_raw, mtr)
    xtr = in_norm.apply(xtr_raw)
    xva = in_norm.apply(xva_raw)
    ytr = _normalized_targets(out_norm, ytr_raw, mtr)

    sizes = [xtr.shape[1], *_hidden_for_kind(kind), len(outputs)]
    net = Mlp.init(sizes, np.random.default_rng(cfg.seed))
    echo = run_training_loop(net, xtr, ytr, mtr, xva, yva_raw, mva, out_norm, cfg)
    echo.update({"kind": kind, "learning_rate": cfg.learning_rate,
                 "weight_decay": cfg.weight_decay, "batch_size": cfg.batch_size,
                 "patience": cfg.patience, "seed": cfg.seed})
    return PerfModel(kind, outputs, net, in_norm, out_norm, echo)


def fit_linear(split: SplitDataset) -> PerfModel:
    """Ordinary least squares per target column in the normalized log domain,
    via the normal equations; ridge fallback when the design is singular."""
    first = split.train
    kind = "dlt" if not isinstance(first, ProfileDataset) else "linear"
    x_raw, y_raw, m = _arrays_for_kind("dlt" if kind == "dlt" else "nn2", first)
    outputs = list(DLT_OUTPUTS) if kind == "dlt" else list(first.primitives)
    in_norm = fit_normalizer(x_raw)
    out_norm = fit_normalizer(y_raw, m)
    xn = in_norm.apply(x_raw)
    yn = _normalized_targets(out_norm, y_raw, m)
    d = xn.shape[1]
    w = np.zeros((len(outputs), d))
    b = np.zeros(len(outputs))
    for j in range(len(outputs)):
        rows = m[:, j]
        if not rows.any():
            continue
        a = np.hstack([xn[rows], np.ones((rows.sum(), 1))])
        gram = a.T @ a
        rhs = a.T @ yn[rows, j]
        if np.linalg.cond(gram) > 1e12:
            log.warning("singular design for column %s; ridge fallback", outputs[j])
            gram = gram + 1e-8 * np.eye(d + 1)
        beta = np.linalg.solve(gram, rhs)
        w[j] = beta[:d]
        b[j] = beta[d]
    net = Mlp([w], [b])
    return PerfModel("linear", outputs, net, in_norm, out_norm,
                     {"kind": "linear"})


# ---------------------------------------------------------------------------
# Prediction tables
# ---------------------------------------------------------------------------

@dataclass
class CostTable:
    """Predicted or measured seconds per (row, column); `defined` marks which
    cells exist."""

    columns: list[str]
    values: np.ndarray
    defined: np.ndarray

    def row_dict(self, i: int) -> dict[str, float]:
        return {c: float(self.values[i, j])
                for j, c in enumerate(self.columns) if self.defined[i, j]}


def predict_costs(model: PerfModel | Nn1Ensemble,
                  configs: Sequence[LayerConfig]) -> CostTable:
    """Batched inference over layer configurations. Predictions are inverted
    through the output normalizer (hence strictly positive); inapplicable
    cells are left undefined, never predicted."""
    x_raw = np.array([cfg.as_tuple() for cfg in configs], dtype=np.float64)
    x_raw = x_raw.reshape(len(configs), 5)
    if isinstance(model, Nn1Ensemble):
        columns = model.outputs
        parts = [m.predict_raw(x_raw)[:, 0] for m in model.models]
        values = np.stack(parts, axis=1) if parts else np.zeros((len(configs), 0))
    else:
        if model.kind == "dlt":
            raise CompatibilityError("layout-transform models do not predict "
                                     "primitive costs; use predict_dlt")
        columns = list(model.outputs)
        values = model.predict_raw(x_raw)
    defined = np.zeros(values.shape, dtype=bool)
    for j, prim in enumerate(columns):
        try:
            defined[:, j] = [applicable(prim, cfg) for cfg in configs]
        except UnknownPrimitiveError:
            defined[:, j] = True  # synthetic columns are always defined
    return CostTable(columns, values, defined)


def evaluate_mdrae(model: PerfModel | Nn1Ensemble,
                   ds: ProfileDataset) -> tuple[float, dict[str, float]]:
    """Pooled and per-column MdRAE of a model against measured times."""
    table = predict_costs(model, ds.configs())
    col = {p: j for j, p in enumerate(table.columns)}
    pooled_pred: list[float] = []
    pooled_truth: list[float] = []
    per_col: dict[str, tuple[list, list]] = {p: ([], []) for p in table.columns}
    for i, rec in enumerate(ds.records):
        for prim, measured in rec.times.items():
            if prim not in col:
                continue
            pred = float(table.values[i, col[prim]])
            pooled_pred.append(pred)
            pooled_truth.append(measured)
            per_col[prim][0].append(pred)
            per_col[prim][1].append(measured)
    overall = mdrae(np.array(pooled_pred), np.array(pooled_truth))
    by_column = {p: mdrae(np.array(a), np.array(b))
                 for p, (a, b) in per_col.items() if a}
    return overall, by_column


def predict_dlt(model: PerfModel,
                pairs: Sequence[tuple[int, int]]) -> list[np.ndarray]:
    """Predicted 3x3 transform-cost matrices for (c, im) pairs; the diagonal
    is exactly zero."""
    if model.n_inputs != 2 or list(model.outputs) != list(DLT_OUTPUTS):
        raise CompatibilityError(
            f"model of kind {model.kind!r} does not predict transform costs")
    x_raw = np.asarray(pairs, dtype=np.float64).reshape(len(pairs), 2)
    flat = model.predict_raw(x_raw)
    out = []
    for row in flat:
        m = row.reshape(3, 3).copy()
        np.fill_diagonal(m, 0.0)
        out.append(m)
    return out
