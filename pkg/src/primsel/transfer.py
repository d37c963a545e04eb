"""Adapting a trained performance model to a new platform: per-primitive
factor correction from a handful of measurements, and fine-tuning on small
fractions of a target-platform dataset with a reduced learning rate.

Includes a seeded synthetic second platform (per-family scale factors plus a
small configuration-dependent perturbation) so cross-hardware behavior can be
exercised without second hardware.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .core import (
    CompatibilityError,
    CoverageError,
    DomainError,
    FAMILIES,
    SizeError,
    get_spec,
)
from .perfmodel import (
    CostTable,
    Normalizer,
    PerfModel,
    SplitDataset,
    TrainConfig,
    dataset_arrays,
    fit_normalizer,
    mdrae,
    predict_costs,
    run_training_loop,
    split_dataset,
    _normalized_targets,
)
from .profiler import ProfileDataset, ProfileRecord

log = logging.getLogger(__name__)


@dataclass
class FactorSet:
    """Per-primitive multiplicative correction factors; primitives that had no
    calibration samples keep the identity factor 1."""

    factors: dict[str, float]

    def get(self, primitive_id: str) -> float:
        return self.factors.get(primitive_id, 1.0)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump({"factors": self.factors}, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "FactorSet":
        with open(path) as fh:
            obj = json.load(fh)
        return cls({str(k): float(v) for k, v in obj["factors"].items()})


# ---------------------------------------------------------------------------
# Sampling and factor correction
# ---------------------------------------------------------------------------

def sample_fraction(ds: ProfileDataset, frac: float, seed: int = 0) -> ProfileDataset:
    """Uniform sample without replacement of max(1, round(frac * n)) records."""
    if not 0 < frac <= 1:
        raise DomainError(f"fraction must be in (0, 1], got {frac}")
    n = len(ds)
    if n == 0:
        raise SizeError("cannot sample from an empty dataset")
    count = max(1, round(frac * n))
    idx = np.random.default_rng(seed).choice(n, size=count, replace=False)
    return ds.subset(sorted(int(i) for i in idx))


def fit_factors(model: PerfModel, samples: ProfileDataset) -> FactorSet:
    """Per primitive, the median of measured/predicted ratios in linear
    seconds over the calibration samples."""
    if len(samples) == 0:
        raise SizeError("factor fitting needs at least one sample")
    table = predict_costs(model, samples.configs())
    col = {p: j for j, p in enumerate(table.columns)}
    ratios: dict[str, list[float]] = {p: [] for p in table.columns}
    for i, rec in enumerate(samples.records):
        for prim, measured in rec.times.items():
            if measured <= 0:
                raise DomainError(
                    f"non-positive measurement for {prim} at row {i}")
            if prim in col:
                ratios[prim].append(measured / float(table.values[i, col[prim]]))
    factors = {}
    for prim, r in ratios.items():
        if r:
            factors[prim] = float(np.sort(r)[(len(r) - 1) // 2])
        else:
            log.warning("no calibration samples for %s; factor kept at 1", prim)
            factors[prim] = 1.0
    return FactorSet(factors)


def apply_factors(table: CostTable, factors: FactorSet) -> CostTable:
    """Scale each primitive column by its factor; undefined cells stay
    undefined."""
    values = table.values.copy()
    for j, prim in enumerate(table.columns):
        values[:, j] *= factors.get(prim)
    return CostTable(list(table.columns), values, table.defined.copy())


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

def fine_tune(model: PerfModel, data: SplitDataset, cfg: TrainConfig,
              refit_out_norm: bool = True) -> PerfModel:
    """Continue training from the model's weights at a tenth of the base
    learning rate. The output normalizer is refitted on the new platform's
    training targets (outputs are platform-dependent); the input normalizer is
    reused (configuration ranges are not)."""
    if model.kind == "dlt":
        raise CompatibilityError("fine_tune expects a layer-cost model")
    train: ProfileDataset = data.train
    if list(train.primitives) != list(model.outputs):
        raise CompatibilityError(
            "dataset primitive columns do not match the model outputs")
    xtr_raw, ytr_raw, mtr = dataset_arrays(train)
    xva_raw, yva_raw, mva = dataset_arrays(data.validation)
    if model.n_inputs != xtr_raw.shape[1]:
        raise CompatibilityError("dataset input schema does not match the model")

    if refit_out_norm:
        refit = fit_normalizer(ytr_raw, mtr)
        # Columns with no coverage in the (possibly tiny) sample keep the
        # source statistics.
        mean = model.out_norm.mean.copy()
        std = model.out_norm.std.copy()
        covered = mtr.any(axis=0)
        mean[covered] = refit.mean[covered]
        std[covered] = refit.std[covered]
        out_norm = Normalizer(mean, std)
    else:
        out_norm = Normalizer(model.out_norm.mean.copy(),
                              model.out_norm.std.copy())

    net = model.net.copy()
    xtr = model.in_norm.apply(xtr_raw)
    xva = model.in_norm.apply(xva_raw)
    ytr = _normalized_targets(out_norm, ytr_raw, mtr)
    echo = run_training_loop(net, xtr, ytr, mtr, xva, yva_raw, mva, out_norm,
                             cfg, learning_rate=cfg.learning_rate / 10.0)
    echo.update({"fine_tuned": True, "base_learning_rate": cfg.learning_rate,
                 "seed": cfg.seed})
    return PerfModel(model.kind, list(model.outputs), net,
                     Normalizer(model.in_norm.mean.copy(), model.in_norm.std.copy()),
                     out_norm, echo)


def tiny_split(sample: ProfileDataset, test: ProfileDataset) -> SplitDataset:
    """SplitDataset for fraction experiments: train on the sample, stop on the
    sample itself (too small for an internal 80/10/10 split), evaluate on the
    platform's held-out test partition."""
    return SplitDataset(sample, sample, test)


# ---------------------------------------------------------------------------
# Synthetic second platform
# ---------------------------------------------------------------------------

def synthetic_platform(ds: ProfileDataset, seed: int = 0,
                       factor_range: tuple[float, float] = (0.5, 4.0),
                       jitter: float = 0.05) -> tuple[ProfileDataset, FactorSet]:
    """A second platform derived from `ds`: every family gets a scale factor
    drawn log-uniformly from factor_range (the two winograd families share one
    draw), and each cell gets a multiplicative perturbation within +-jitter.
    Returns the scaled dataset and the true factors per primitive."""
    rng = np.random.default_rng(seed)
    lo, hi = np.log(factor_range[0]), np.log(factor_range[1])
    family_factor = {}
    for fam in FAMILIES:
        if fam == "wino5" and "wino3" in family_factor:
            family_factor[fam] = family_factor["wino3"]
        else:
            family_factor[fam] = float(np.exp(rng.uniform(lo, hi)))
    prim_factor = {p: family_factor[get_spec(p).family]
                   for p in ds.primitives if _known(p)}
    records = []
    for rec in ds.records:
        times = {}
        for prim, t in rec.times.items():
            base = prim_factor.get(prim, 1.0)
            wiggle = 1.0 + jitter * float(rng.uniform(-1.0, 1.0))
            times[prim] = t * base * wiggle
        records.append(ProfileRecord(rec.config, times))
    return (ProfileDataset(list(ds.primitives), records),
            FactorSet(dict(prim_factor)))


def _known(primitive_id: str) -> bool:
    try:
        get_spec(primitive_id)
        return True
    except Exception:
        return False


# ---------------------------------------------------------------------------
# Family transfer matrix
# ---------------------------------------------------------------------------

def mask_to_family(ds: ProfileDataset, family: str) -> ProfileDataset:
    """Keep only the measured values of one primitive family; rows with no
    such value drop out."""
    keep = {p for p in ds.primitives if _known(p) and get_spec(p).family == family}
    records = []
    for rec in ds.records:
        times = {p: t for p, t in rec.times.items() if p in keep}
        if times:
            records.append(ProfileRecord(rec.config, times))
    return ProfileDataset(list(ds.primitives), records)


def family_mdrae(model: PerfModel, ds: ProfileDataset) -> dict[str, float]:
    """MdRAE per primitive family on a dataset."""
    table = predict_costs(model, ds.configs())
    col = {p: j for j, p in enumerate(table.columns)}
    by_family: dict[str, tuple[list, list]] = {f: ([], []) for f in FAMILIES}
    for i, rec in enumerate(ds.records):
        for prim, measured in rec.times.items():
            if prim not in col or not _known(prim):
                continue
            fam = get_spec(prim).family
            by_family[fam][0].append(float(table.values[i, col[prim]]))
            by_family[fam][1].append(measured)
    out = {}
    for fam, (pred, truth) in by_family.items():
        if pred:
            out[fam] = mdrae(np.array(pred), np.array(truth))
    return out


def family_transfer_matrix(model: PerfModel, target_ds: ProfileDataset,
                           cfg: TrainConfig) -> tuple[np.ndarray, list[str]]:
    """7x7 table of relative MdRAE: row r = model fine-tuned using only data
    from family r, column c = MdRAE evaluated on family c, each row normalized
    by its diagonal entry. Returns (matrix, family order)."""
    split = split_dataset(target_ds, cfg.seed)
    present = {get_spec(p).family for p in target_ds.primitives if _known(p)}
    missing = [f for f in FAMILIES if f not in present]
    if missing:
        raise CoverageError(f"families missing from dataset: {missing}", missing)
    mat = np.zeros((len(FAMILIES), len(FAMILIES)))
    for r, fam in enumerate(FAMILIES):
        fam_train = mask_to_family(split.train, fam)
        if len(fam_train) == 0:
            raise CoverageError(f"no training rows for family {fam}", [fam])
        tuned = fine_tune(model, SplitDataset(fam_train, fam_train, split.test),
                          cfg)
        scores = family_mdrae(tuned, split.test)
        for c, fam_c in enumerate(FAMILIES):
            mat[r, c] = scores.get(fam_c, np.nan)
        diag = mat[r, r]
        mat[r] /= max(diag, 1e-12)
    return mat, list(FAMILIES)
