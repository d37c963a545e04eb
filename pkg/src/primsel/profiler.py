"""Measures primitive and layout-transformation execution times on the host
and materializes the training datasets.

Timing protocol: a few untimed warmup runs, then `reps` timed runs of the bare
primitive call on one seeded normal-distributed input; the recorded value is
the median (lower-middle element when reps is even). Input generation and
layout preparation stay outside the timed region, since layout changes are
priced separately as transformation costs.
"""
from __future__ import annotations

import csv
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import (
    ApplicabilityError,
    InvalidConfigError,
    LAYOUTS,
    LayerConfig,
    PRIMITIVE_IDS,
    SizeError,
    get_spec,
)
from .primitives import Tensor3, random_input, random_kernels, run_primitive, transform_layout

log = logging.getLogger(__name__)

Clock = Callable[[], float]

DEFAULT_REPS = 25
DEFAULT_WARMUPS = 3

# Durations below one clock tick are clamped so persisted times stay positive.
_MIN_DURATION = 1e-9

try:
    from threadpoolctl import threadpool_limits as _threadpool_limits
except ImportError:  # pragma: no cover
    _threadpool_limits = None


@contextmanager
def _single_thread_blas():
    # Timed regions must not spawn internal parallelism.
    if _threadpool_limits is None:
        yield
    else:
        with _threadpool_limits(limits=1):
            yield


def pin_to_one_cpu() -> bool:
    """Best-effort pin of this process to a single core; False on failure."""
    try:
        cpus = os.sched_getaffinity(0)
        os.sched_setaffinity(0, {min(cpus)})
        return True
    except (AttributeError, OSError) as exc:
        log.warning("could not pin process to one cpu: %s", exc)
        return False


def median_low(values: Sequence[float]) -> float:
    """Median; for an even count, the lower of the two middle elements."""
    if not len(values):
        raise SizeError("median of an empty sequence")
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def derive_seed(master: int, *key: int) -> int:
    state = np.random.SeedSequence(entropy=master, spawn_key=tuple(key))
    return int(state.generate_state(1, dtype=np.uint64)[0])


def time_primitive(primitive_id: str, config: LayerConfig,
                   reps: int = DEFAULT_REPS, warmups: int = DEFAULT_WARMUPS,
                   seed: int = 0, clock: Clock = time.perf_counter) -> float:
    """Median execution time in seconds of one primitive on one configuration."""
    if reps < 1:
        raise SizeError(f"reps must be >= 1, got {reps}")
    spec = get_spec(primitive_id)
    if not spec.applicable(config):
        raise ApplicabilityError(
            f"{primitive_id} is not applicable to {config.as_tuple()}")
    rng = np.random.default_rng(seed)
    t = random_input(config, spec.input_layout, rng)
    kernels = random_kernels(config, rng)
    durations = []
    with _single_thread_blas():
        for _ in range(warmups):
            run_primitive(primitive_id, t, kernels, config)
        for _ in range(reps):
            t0 = clock()
            run_primitive(primitive_id, t, kernels, config)
            t1 = clock()
            durations.append(max(t1 - t0, _MIN_DURATION))
    return median_low(durations)


# ---------------------------------------------------------------------------
# Dataset records
# ---------------------------------------------------------------------------

@dataclass
class ProfileRecord:
    """Measured times for one layer configuration; inapplicable primitives are
    simply absent from the mapping."""

    config: LayerConfig
    times: dict[str, float]


@dataclass
class ProfileDataset:
    """A column-ordered collection of profile records."""

    primitives: list[str] = field(default_factory=lambda: list(PRIMITIVE_IDS))
    records: list[ProfileRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def configs(self) -> list[LayerConfig]:
        return [r.config for r in self.records]

    def subset(self, indices: Iterable[int]) -> "ProfileDataset":
        return ProfileDataset(list(self.primitives),
                              [self.records[i] for i in indices])

    def save_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_CONFIG_FIELDS + self.primitives)
            for rec in self.records:
                w.writerow(_record_row(rec, self.primitives))

    @classmethod
    def load_csv(cls, path: str) -> "ProfileDataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:5] != _CONFIG_FIELDS:
                raise InvalidConfigError(
                    f"{path}: expected header starting with k,c,im,f,s")
            primitives = header[5:]
            records = []
            for row in reader:
                if not row:
                    continue
                cfg = LayerConfig(k=int(row[0]), c=int(row[1]), im=int(row[2]),
                                  f=int(row[3]), s=int(row[4]))
                times = {}
                for prim, cell in zip(primitives, row[5:]):
                    if cell != "NA":
                        times[prim] = float(cell)
                records.append(ProfileRecord(cfg, times))
        return cls(primitives, records)


_CONFIG_FIELDS = ["k", "c", "im", "f", "s"]


def _record_row(rec: ProfileRecord, primitives: Sequence[str]) -> list:
    cfg = rec.config
    row: list = [cfg.k, cfg.c, cfg.im, cfg.f, cfg.s]
    for prim in primitives:
        row.append(repr(rec.times[prim]) if prim in rec.times else "NA")
    return row


@dataclass
class DltRecord:
    """3x3 layout-transformation cost matrix for one (c, im) data size.
    Row/column order follows LAYOUTS (chw, hcw, hwc); the diagonal is 0."""

    c: int
    im: int
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise InvalidConfigError(f"transform matrix must be 3x3, got {m.shape}")
        self.matrix = m


def profile_layout_transforms(c: int, im: int, reps: int = DEFAULT_REPS,
                              warmups: int = DEFAULT_WARMUPS, seed: int = 0,
                              clock: Clock = time.perf_counter) -> DltRecord:
    """Median times for all nine layout transformations of a (c, im) tensor.
    The identity transformations are 0 by definition and never executed."""
    if c < 1 or im < 1:
        raise InvalidConfigError(f"c and im must be >= 1, got c={c} im={im}")
    if reps < 1:
        raise SizeError(f"reps must be >= 1, got {reps}")
    rng = np.random.default_rng(seed)
    matrix = np.zeros((3, 3), dtype=np.float64)
    with _single_thread_blas():
        for i, src in enumerate(LAYOUTS):
            data = rng.standard_normal(c * im * im, dtype=np.float32)
            t = Tensor3(src, c, im, im, data)
            for j, dst in enumerate(LAYOUTS):
                if i == j:
                    continue
                durations = []
                for _ in range(warmups):
                    transform_layout(t, dst)
                for _ in range(reps):
                    t0 = clock()
                    transform_layout(t, dst)
                    t1 = clock()
                    durations.append(max(t1 - t0, _MIN_DURATION))
                matrix[i, j] = median_low(durations)
    return DltRecord(c, im, matrix)


def save_dlt_csv(records: Sequence[DltRecord], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["c", "im", "from", "to", "seconds"])
        for rec in records:
            for i, src in enumerate(LAYOUTS):
                for j, dst in enumerate(LAYOUTS):
                    w.writerow([rec.c, rec.im, src.value, dst.value,
                                repr(float(rec.matrix[i, j]))])


def load_dlt_csv(path: str) -> list[DltRecord]:
    by_size: dict[tuple[int, int], np.ndarray] = {}
    order: list[tuple[int, int]] = []
    index = {lay.value: i for i, lay in enumerate(LAYOUTS)}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["c", "im", "from", "to", "seconds"]:
            raise InvalidConfigError(f"{path}: expected header c,im,from,to,seconds")
        for row in reader:
            if not row:
                continue
            key = (int(row[0]), int(row[1]))
            if key not in by_size:
                by_size[key] = np.zeros((3, 3), dtype=np.float64)
                order.append(key)
            by_size[key][index[row[2]], index[row[3]]] = float(row[4])
    return [DltRecord(c, im, by_size[(c, im)]) for c, im in order]


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

def generate_grid(triplets: Sequence[tuple[int, int, int]],
                  f_set: Sequence[int], s_set: Sequence[int]) -> list[LayerConfig]:
    """Cartesian product of (c, k, im) triplets with kernel sizes and strides,
    minus impossible combinations (e.g. f > im). Triplet-major order."""
    if not triplets or not f_set or not s_set:
        raise SizeError("triplets, f_set and s_set must all be non-empty")
    grid = []
    for c, k, im in triplets:
        for f in f_set:
            for s in s_set:
                if f % 2 == 0 or f < 1 or s < 1 or f > im or s > im:
                    continue
                if k < 1 or c < 1 or im < 1:
                    continue
                grid.append(LayerConfig(k=k, c=c, im=im, f=f, s=s))
    return grid


# Channel choices per spatial size, shaped like the stage pyramids of common
# CNNs (wide images with few channels down to 7x7 with many channels).
_DESK_STAGES = {
    112: (3, 8, 16, 24),
    96: (3, 12, 24),
    80: (8, 16, 32),
    56: (16, 24, 32, 48),
    40: (24, 40, 64),
    28: (32, 48, 64, 96),
    24: (48, 64, 96, 128),
    20: (64, 96, 128, 160),
    16: (96, 128, 160, 192),
    14: (96, 128, 192, 224),
    12: (128, 160, 224),
    10: (160, 224, 256),
    8: (96, 128, 192, 224, 256),
    7: (128, 192, 256, 320),
}

# Stage shapes of a typical 20-layer evaluation chain; kept explicitly so the
# grid covers networks assembled from these stages, the way a grid extracted
# from real architectures covers the networks being optimized.
_CHAIN_STAGE_TRIPLETS = (
    (16, 64, 56), (64, 96, 52), (96, 96, 50), (96, 128, 24),
    (128, 160, 20), (160, 160, 18), (160, 192, 16), (192, 192, 16),
    (192, 224, 14), (224, 224, 12), (224, 256, 10), (256, 256, 10),
    (256, 256, 8), (256, 224, 8), (224, 224, 8), (224, 192, 8),
    (192, 160, 8), (160, 128, 8), (128, 96, 8), (96, 64, 8),
)

# k*c*im^2 cap: keeps the slowest profiled run (f=5, s=1) at tens of
# milliseconds on one desktop core.
_DESK_MAC_CAP = 8_000_000


def _desk_triplets() -> tuple[tuple[int, int, int], ...]:
    trips: list[tuple[int, int, int]] = []
    for im, channels in _DESK_STAGES.items():
        for c in channels:
            for k in (max(1, c // 2), c, 2 * c):
                t = (c, k, im)
                if k * c * im * im <= _DESK_MAC_CAP and t not in trips:
                    trips.append(t)
    for t in _CHAIN_STAGE_TRIPLETS:
        if t not in trips:
            trips.append(t)
    return tuple(trips)


DESK_TRIPLETS: tuple[tuple[int, int, int], ...] = _desk_triplets()

DESK_F_SET = (1, 3, 5)
DESK_S_SET = (1, 2)


def desk_grid() -> list[LayerConfig]:
    """The built-in desk-scale grid (several hundred configurations)."""
    return generate_grid(DESK_TRIPLETS, DESK_F_SET, DESK_S_SET)


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------

def build_dataset(grid: Sequence[LayerConfig], reps: int = DEFAULT_REPS,
                  warmups: int = DEFAULT_WARMUPS, seed: int = 0,
                  clock: Clock = time.perf_counter,
                  out_csv: str | None = None, dlt_csv: str | None = None,
                  progress: Callable[[str], None] | None = None,
                  ) -> tuple[ProfileDataset, list[DltRecord]]:
    """Profile every applicable primitive for every grid config, plus the
    layout-transformation costs for every distinct (c, im) pair.

    When out_csv/dlt_csv are given, records are flushed after each measurement
    so an interrupted run can resume: configs already present in the files are
    skipped (their rows are reused).
    """
    if not grid:
        raise SizeError("grid must be non-empty")
    primitives = list(PRIMITIVE_IDS)

    done: dict[tuple, ProfileRecord] = {}
    if out_csv and os.path.exists(out_csv):
        prior = ProfileDataset.load_csv(out_csv)
        if prior.primitives != primitives:
            raise InvalidConfigError(
                f"{out_csv}: primitive columns do not match the registry")
        done = {r.config.as_tuple(): r for r in prior.records}

    records: list[ProfileRecord] = []
    out_fh = None
    writer = None
    try:
        if out_csv:
            fresh = not done
            out_fh = open(out_csv, "a" if not fresh else "w", newline="")
            writer = csv.writer(out_fh)
            if fresh:
                writer.writerow(_CONFIG_FIELDS + primitives)
                out_fh.flush()
        for idx, cfg in enumerate(grid):
            key = cfg.as_tuple()
            if key in done:
                records.append(done[key])
                continue
            times = {}
            for pidx, prim in enumerate(primitives):
                if not get_spec(prim).applicable(cfg):
                    continue
                times[prim] = time_primitive(
                    prim, cfg, reps=reps, warmups=warmups,
                    seed=derive_seed(seed, idx, pidx), clock=clock)
            rec = ProfileRecord(cfg, times)
            records.append(rec)
            if writer is not None:
                writer.writerow(_record_row(rec, primitives))
                out_fh.flush()
            if progress is not None:
                progress(f"profiled {idx + 1}/{len(grid)}: {key}")
    finally:
        if out_fh is not None:
            out_fh.close()

    dataset = ProfileDataset(primitives, records)

    pairs: list[tuple[int, int]] = []
    for cfg in grid:
        if (cfg.c, cfg.im) not in pairs:
            pairs.append((cfg.c, cfg.im))
    dlt_done: dict[tuple[int, int], DltRecord] = {}
    if dlt_csv and os.path.exists(dlt_csv):
        dlt_done = {(r.c, r.im): r for r in load_dlt_csv(dlt_csv)}
    dlt_records = []
    for pidx, (c, im) in enumerate(pairs):
        if (c, im) in dlt_done:
            dlt_records.append(dlt_done[(c, im)])
            continue
        dlt_records.append(profile_layout_transforms(
            c, im, reps=reps, warmups=warmups,
            seed=derive_seed(seed, 1_000_000, pidx), clock=clock))
        if dlt_csv:
            save_dlt_csv(dlt_records, dlt_csv)
        if progress is not None:
            progress(f"layout transforms {pidx + 1}/{len(pairs)}: ({c}, {im})")
    if dlt_csv and not os.path.exists(dlt_csv):
        save_dlt_csv(dlt_records, dlt_csv)
    return dataset, dlt_records
