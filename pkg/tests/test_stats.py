import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
import statsmodels.api as sm
from conftest import make_cohort
from hypothesis import given, settings
from hypothesis import strategies as st
from statsmodels.duration.survfunc import survdiff

from rerand.cohort import Cohort, Outcome, StratumFactor, Subject
from rerand.stats import (
    LARGER,
    SMALLER,
    StatError,
    StatKind,
    TestStatistic,
    make_evaluator,
    normal_cdf,
    normal_quantile,
    stratified_logrank,
    wald_linear,
    wald_logistic,
)

NO_COV = StatKind("wald_linear", covariates=())


def _cohort(levels, responses, arms, factors):
    subjects = [Subject(f"s{i}", tuple(lv), r, a) for i, (lv, r, a) in enumerate(zip(levels, responses, arms))]
    return Cohort(factors, subjects)


# -- normal distribution --------------------------------------------------------

@pytest.mark.parametrize("q", [1e-10, 0.001, 0.01, 0.3, 0.5, 0.9, 0.99, 0.999999])
def test_normal_quantile_against_mpmath(q):
    mpmath.mp.dps = 40
    expected = float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(q) - 1))
    assert normal_quantile(q) == pytest.approx(expected, rel=1e-13, abs=1e-15)


@pytest.mark.parametrize("x", [-8.0, -2.326, 0.0, 1.0, 2.576, 6.0])
def test_normal_cdf_against_mpmath(x):
    mpmath.mp.dps = 40
    assert normal_cdf(x) == pytest.approx(float(mpmath.ncdf(x)), rel=1e-13)


def test_normal_quantile_domain():
    for q in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            normal_quantile(q)


# -- linear -----------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_wald_linear_matches_closed_form_ols(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(12, 40))
    factors = (StratumFactor("a", ("0", "1")), StratumFactor("b", ("0", "1", "2")))
    levels = np.column_stack([rng.integers(0, 2, n), rng.integers(0, 3, n)])
    levels[:3] = [[0, 0], [1, 1], [0, 2]]
    arms = rng.integers(0, 2, n)
    arms[:2] = [0, 1]
    y = rng.normal(size=n) + 0.7 * arms
    c = _cohort(levels, [Outcome("continuous", v) for v in y], arms, factors)
    # closed form: normal equations with explicit inverse
    X = np.column_stack([np.ones(n), arms, levels[:, 0] == 1, levels[:, 1] == 1, levels[:, 1] == 2]).astype(float)
    XtX_inv = np.linalg.inv(X.T @ X)
    beta = XtX_inv @ X.T @ y
    resid = y - X @ beta
    s2 = resid @ resid / (n - X.shape[1])
    z = beta[1] / math.sqrt(s2 * XtX_inv[1, 1])
    got = wald_linear(c, arms, StatKind("wald_linear"))
    assert got.value == pytest.approx(z, abs=1e-8)
    assert got.direction == LARGER
    fit = sm.OLS(y, X).fit()
    assert got.value == pytest.approx(fit.tvalues[1], abs=1e-8)


def test_linear_batch_equals_single(continuous_cohort):
    kind = StatKind("wald_linear")
    rows = np.random.default_rng(0).integers(0, 2, (25, continuous_cohort.n_subjects)).astype(np.uint8)
    batch = make_evaluator(continuous_cohort, kind).evaluate(rows)
    single = [wald_linear(continuous_cohort, r, kind).value for r in rows]
    np.testing.assert_allclose(batch, single, rtol=1e-10, atol=1e-12)


def test_linear_rank_deficiency_names_columns():
    factors = (StratumFactor("a", ("0", "1")), StratumFactor("b", ("x", "y")))
    levels = [(0, 0), (1, 1), (0, 0), (1, 1), (0, 0), (1, 1), (0, 0), (1, 1)]
    arms = [0, 1, 1, 0, 0, 1, 1, 0]
    c = _cohort(levels, [Outcome("continuous", float(i)) for i in range(8)], arms, factors)
    with pytest.raises(StatError, match=r"'b\[y\]' is collinear with .*'a\[1\]'"):
        wald_linear(c, arms, StatKind("wald_linear"))


def test_linear_treatment_collinear_with_covariate():
    factors = (StratumFactor("a", ("0", "1")),)
    levels = [(i % 2,) for i in range(10)]
    arms = [i % 2 for i in range(10)]
    c = _cohort(levels, [Outcome("continuous", float(i)) for i in range(10)], arms, factors)
    with pytest.raises(StatError, match="collinear"):
        wald_linear(c, arms, StatKind("wald_linear"))
    with pytest.raises(StatError, match="collinear"):
        make_evaluator(c, StatKind("wald_linear")).evaluate(np.array([arms], dtype=np.uint8))


def test_linear_zero_residual_variance():
    factors = (StratumFactor("a", ("0", "1")),)
    arms = [0, 1] * 5
    c = _cohort([(0,)] * 10, [Outcome("continuous", 2.0 * a) for a in arms], arms, factors)
    with pytest.raises(StatError, match="residual variance is zero"):
        wald_linear(c, arms, NO_COV)


# -- logistic ---------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_wald_logistic_matches_two_by_two_log_odds(seed):
    rng = np.random.default_rng(100 + seed)
    cells = rng.integers(3, 30, size=4)  # (arm0,y0) (arm0,y1) (arm1,y0) (arm1,y1)
    arms, ys = [], []
    for (a, y), k in zip([(0, 0), (0, 1), (1, 0), (1, 1)], cells):
        arms += [a] * k
        ys += [y] * k
    a0, b0, a1, b1 = cells.astype(float)
    z = math.log((b1 / a1) / (b0 / a0)) / math.sqrt(1 / a0 + 1 / b0 + 1 / a1 + 1 / b1)
    factors = (StratumFactor("g", ("0", "1")),)
    c = _cohort([(0,)] * len(arms), [Outcome("binary", float(v)) for v in ys], arms, factors)
    kind = StatKind("wald_logistic", covariates=())
    assert wald_logistic(c, arms, kind).value == pytest.approx(z, abs=1e-6)
    batch = make_evaluator(c, kind).evaluate(np.array([arms], dtype=np.uint8))
    assert batch[0] == pytest.approx(z, abs=1e-6)


def test_logistic_with_covariates_matches_glm():
    c = make_cohort(150, "binary", seed=9)
    arms = c.observed_arms()
    y, _ = c.response_arrays()
    lv = c.levels_matrix()
    X = np.column_stack([np.ones(c.n_subjects), arms, lv[:, 0] == 1, lv[:, 1] == 1, lv[:, 1] == 2]).astype(float)
    fit = sm.GLM(y, X, family=sm.families.Binomial()).fit(tol=1e-12)
    got = wald_logistic(c, arms, StatKind("wald_logistic"))
    assert got.value == pytest.approx(fit.tvalues[1], abs=1e-6)


def test_logistic_batch_equals_single():
    c = make_cohort(100, "binary", seed=2)
    kind = StatKind("wald_logistic")
    rows = np.random.default_rng(1).integers(0, 2, (10, c.n_subjects)).astype(np.uint8)
    batch = make_evaluator(c, kind).evaluate(rows)
    single = [wald_logistic(c, r, kind).value for r in rows]
    np.testing.assert_allclose(batch, single, atol=1e-8)


def test_logistic_separation_reported():
    arms = [0] * 10 + [1] * 10
    factors = (StratumFactor("g", ("0", "1")),)
    c = _cohort([(0,)] * 20, [Outcome("binary", float(a)) for a in arms], arms, factors)
    with pytest.raises(StatError, match="separation"):
        wald_logistic(c, arms, StatKind("wald_logistic", covariates=()))


# -- log-rank ---------------------------------------------------------------------

# (time, event, arm, stratum); O - E and V computed by hand with exact fractions
LOGRANK_FIXTURES = {
    "tiny": ([(1, 1, 1, 0), (2, 1, 0, 0), (3, 1, 1, 0), (4, 1, 0, 0)], Fraction(2, 3), Fraction(13, 18)),
    "censored": ([(1, 1, 1, 0), (2, 0, 1, 0), (2, 1, 0, 0), (3, 1, 0, 0), (5, 0, 1, 0), (6, 1, 0, 0)],
                 Fraction(-7, 30), Fraction(641, 900)),
    "ties": ([(2, 1, 1, 0), (2, 1, 0, 0), (2, 1, 0, 0), (3, 1, 1, 0), (4, 0, 0, 0), (4, 1, 1, 0)],
             Fraction(1, 3), Fraction(83, 90)),
    "two_strata": ([(1, 1, 1, 0), (3, 1, 0, 0), (4, 0, 1, 0), (2, 1, 0, 1), (2, 1, 1, 1), (5, 1, 1, 1),
                    (6, 0, 0, 1)], Fraction(1, 3), Fraction(19, 18)),
    "three_strata": ([(1, 1, 0, 0), (2, 1, 1, 0), (1, 0, 1, 1), (3, 1, 0, 1), (4, 1, 1, 1), (2, 1, 1, 2),
                      (2, 0, 0, 2), (3, 1, 0, 2), (7, 1, 1, 2)], Fraction(-1), Fraction(1)),
}


def _survival_cohort(rows):
    factors = (StratumFactor("s", ("0", "1", "2")),)
    return _cohort([(r[3],) for r in rows], [Outcome("survival", r[0], bool(r[1])) for r in rows],
                   [r[2] for r in rows], factors)


@pytest.mark.parametrize("name", sorted(LOGRANK_FIXTURES))
def test_logrank_hand_fixtures(name):
    rows, o_minus_e, var = LOGRANK_FIXTURES[name]
    c = _survival_cohort(rows)
    expected = float(o_minus_e) / math.sqrt(float(var))
    kind = StatKind("stratified_logrank", strata=("s",))
    got = stratified_logrank(c, [r[2] for r in rows], kind)
    assert got.value == pytest.approx(expected, rel=1e-13)
    assert got.direction == SMALLER
    batch = make_evaluator(c, kind).evaluate(np.array([[r[2] for r in rows]], dtype=np.uint8))
    assert batch[0] == pytest.approx(expected, rel=1e-12)
    a = np.array(rows, dtype=float)
    chisq, _ = survdiff(a[:, 0], a[:, 1], a[:, 2], strata=a[:, 3])
    assert expected ** 2 == pytest.approx(chisq, rel=1e-10)


def test_single_stratum_equals_unstratified():
    c = make_cohort(120, "survival", seed=4)
    # every subject in one ecog level: stratifying on it changes nothing
    one = Cohort(c.factors, [Subject(s.id, (0,) + s.factor_levels[1:], s.response, s.arm) for s in c.subjects])
    arms = one.observed_arms()
    strat = stratified_logrank(one, arms, StatKind("stratified_logrank", strata=("ecog",)))
    t, e = one.response_arrays()
    chisq, _ = survdiff(t, e.astype(float), arms.astype(float))
    assert strat.value ** 2 == pytest.approx(chisq, rel=1e-10)
    both = stratified_logrank(c, arms, StatKind("stratified_logrank", strata=("tmb",)))
    lv = c.levels_matrix()
    chisq2, _ = survdiff(t, e.astype(float), arms.astype(float), strata=lv[:, 1])
    assert both.value ** 2 == pytest.approx(chisq2, rel=1e-10)


def test_logrank_batch_equals_single(survival_cohort):
    kind = StatKind("stratified_logrank")
    rows = np.random.default_rng(3).integers(0, 2, (20, survival_cohort.n_subjects)).astype(np.uint8)
    batch = make_evaluator(survival_cohort, kind).evaluate(rows)
    single = [stratified_logrank(survival_cohort, r, kind).value for r in rows]
    np.testing.assert_allclose(batch, single, rtol=1e-10, atol=1e-12)


def test_logrank_no_events():
    rows = [(1, 0, 0, 0), (2, 0, 1, 0), (3, 0, 1, 0)]
    with pytest.raises(StatError, match="no events"):
        stratified_logrank(_survival_cohort(rows), [0, 1, 1], StatKind("stratified_logrank", strata=("s",)))


# -- conventions ---------------------------------------------------------------------

def test_ties_are_as_extreme():
    obs = TestStatistic(1.5, LARGER)
    assert list(obs.at_least_as_extreme(np.array([1.5, 1.5 - 1e-14, 1.6, 1.0]))) == [True, True, True, False]
    low = TestStatistic(-2.0, SMALLER)
    assert list(low.at_least_as_extreme(np.array([-2.0, -3.0, -1.9]))) == [True, True, False]


def test_statkind_names_and_round_trip():
    k = StatKind("stratified-logrank", strata=("ecog",))
    assert k.name == "stratified_logrank"
    assert StatKind.from_dict(k.to_dict()) == k
    with pytest.raises(ValueError):
        StatKind("t_test")


def test_statistics_require_two_arms():
    c = make_cohort(30, "continuous", seed=0, n_arms=3)
    with pytest.raises(StatError, match="exactly 2 arms"):
        make_evaluator(c, StatKind("wald_linear"))


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(-5, 5), scale=st.floats(0.1, 10))
def test_wald_linear_affine_invariance(shift, scale):
    c = make_cohort(60, "continuous", seed=7)
    arms = c.observed_arms()
    y, _ = c.response_arrays()
    moved = c.with_responses([Outcome("continuous", shift + scale * v) for v in y])
    kind = StatKind("wald_linear")
    assert wald_linear(moved, arms, kind).value == pytest.approx(wald_linear(c, arms, kind).value, rel=1e-8)


def test_relabelling_arms_flips_sign(survival_cohort):
    arms = survival_cohort.observed_arms()
    kind = StatKind("stratified_logrank")
    a = stratified_logrank(survival_cohort, arms, kind).value
    b = stratified_logrank(survival_cohort, 1 - arms, kind).value
    assert a == pytest.approx(-b, rel=1e-12)
