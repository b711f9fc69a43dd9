import numpy as np
import pytest

from rerand.cohort import Cohort, Outcome, StratumFactor, Subject


def make_cohort(n=200, kind="survival", seed=0, n_arms=2, ratio=None, factors=None, with_arms=True):
    """Random cohort with two stratification factors and the requested outcome."""
    rng = np.random.default_rng(seed)
    if factors is None:
        factors = (StratumFactor("ecog", ("0", "1")), StratumFactor("tmb", ("low", "mid", "high")))
    labels = ("control", "treatment") if n_arms == 2 else tuple(f"arm{k}" for k in range(n_arms))
    ratio = ratio or (1,) * n_arms
    subjects = []
    for i in range(n):
        lv = tuple(int(rng.integers(f.n_levels)) for f in factors)
        if kind == "survival":
            resp = Outcome("survival", float(rng.exponential()) + 1e-3, bool(rng.random() < 0.6))
        elif kind == "continuous":
            resp = Outcome("continuous", float(rng.normal()))
        elif kind == "binary":
            resp = Outcome("binary", float(rng.random() < 0.4))
        else:
            resp = None
        arm = int(rng.integers(n_arms)) if with_arms else None
        subjects.append(Subject(f"s{i:04d}", lv, resp, arm))
    return Cohort(factors, subjects, labels, ratio)


@pytest.fixture
def survival_cohort():
    return make_cohort(200, "survival", seed=11)


@pytest.fixture
def continuous_cohort():
    return make_cohort(120, "continuous", seed=5)
