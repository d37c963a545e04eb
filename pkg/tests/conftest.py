import numpy as np
import pytest

from primsel.core import LayerConfig, PRIMITIVE_IDS, applicable, get_spec
from primsel.profiler import ProfileDataset, ProfileRecord


class FakeClock:
    """Scripted monotonic clock: each timed interval consumes the next
    duration from the script (cycling)."""

    def __init__(self, durations):
        self.durations = [float(d) for d in durations]
        self.i = 0
        self.now = 0.0
        self.opening = True

    def __call__(self):
        if self.opening:
            self.opening = False
            return self.now
        self.now += self.durations[self.i % len(self.durations)]
        self.i += 1
        self.opening = True
        return self.now


@pytest.fixture
def fake_clock():
    return FakeClock


def synthetic_dataset(n, seed=0, primitives=("synth",), cost_fn=None, noise=0.01):
    """Dataset of random common-range configs with analytic per-primitive
    costs; the default generator is R = 1e-9 * k * c * im^2 * f^2 / s^2."""
    rng = np.random.default_rng(seed)
    if cost_fn is None:
        cost_fn = lambda cfg: 1e-9 * cfg.k * cfg.c * cfg.im ** 2 * cfg.f ** 2 / cfg.s ** 2
    records = []
    while len(records) < n:
        k = int(rng.integers(1, 2049))
        c = int(rng.integers(1, 2049))
        im = int(rng.integers(7, 300))
        f = int(rng.choice([1, 3, 5, 7, 9, 11]))
        s = int(rng.choice([1, 2, 4]))
        if f > im or s > im:
            continue
        cfg = LayerConfig(k=k, c=c, im=im, f=f, s=s)
        times = {}
        for prim in primitives:
            base = cost_fn(cfg) if not isinstance(cost_fn, dict) else cost_fn[prim](cfg)
            times[prim] = base * (1.0 + noise * float(rng.uniform(-1.0, 1.0)))
        records.append(ProfileRecord(cfg, times))
    return ProfileDataset(list(primitives), records)


_FAMILY_COEF = {"direct": 3.0, "im2": 1.0, "kn2": 1.2, "wino3": 0.7,
                "wino5": 0.9, "conv-1x1": 0.5, "mec": 1.5}


def registry_dataset(n, seed=0, noise=0.01):
    """Synthetic dataset over the real 9-primitive registry: per-family cost
    coefficients on a product law, so all applicability patterns appear."""
    rng = np.random.default_rng(seed)
    records = []
    while len(records) < n:
        k = int(rng.integers(1, 256))
        c = int(rng.integers(1, 256))
        im = int(rng.integers(7, 120))
        f = int(rng.choice([1, 3, 5, 7]))
        s = int(rng.choice([1, 2]))
        if f > im:
            continue
        cfg = LayerConfig(k=k, c=c, im=im, f=f, s=s)
        times = {}
        for p in PRIMITIVE_IDS:
            if applicable(p, cfg):
                fam = get_spec(p).family
                base = (1e-10 * _FAMILY_COEF[fam] * cfg.k * cfg.c
                        * cfg.im ** 2 * cfg.f ** 2 / cfg.s ** 2)
                times[p] = base * (1.0 + noise * float(rng.uniform(-1.0, 1.0)))
        records.append(ProfileRecord(cfg, times))
    return ProfileDataset(list(PRIMITIVE_IDS), records)


# ---------------------------------------------------------------------------
# Acceptance reporting: one pass/fail line per criterion after the test run.
# ---------------------------------------------------------------------------

ACCEPTANCE_RESULTS = {}


def record_acceptance(number, name, passed, detail=""):
    ACCEPTANCE_RESULTS[number] = (name, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        name, passed, detail = ACCEPTANCE_RESULTS[number]
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number}: {status} - {name}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
