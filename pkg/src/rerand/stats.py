"""Test statistics evaluated on each replicate, and normal-distribution helpers.

Every statistic has two implementations.  The plain functions
(:func:`wald_linear`, :func:`wald_logistic`, :func:`stratified_logrank`)
evaluate one assignment directly and are easy to audit.  The evaluators from
:func:`make_evaluator` precompute everything that does not depend on the
assignment and then score a whole (R, n) assignment matrix with a few matrix
products; the engine uses these for both the observed and the replicate
statistics so that exact ties compare bit-identical values.

The treatment indicator is ``arm == 1``: arm label 0 is the reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .cohort import Cohort

__all__ = [
    "StatError",
    "StatKind",
    "TestStatistic",
    "LARGER",
    "SMALLER",
    "normal_cdf",
    "normal_quantile",
    "covariate_design",
    "wald_linear",
    "wald_logistic",
    "stratified_logrank",
    "make_evaluator",
    "LinearEvaluator",
    "LogisticEvaluator",
    "LogrankEvaluator",
]

LARGER = "larger_is_more_extreme"
SMALLER = "smaller_is_more_extreme"

STAT_NAMES = ("wald_linear", "wald_logistic", "stratified_logrank")
_DEFAULT_DIRECTION = {"wald_linear": LARGER, "wald_logistic": LARGER, "stratified_logrank": SMALLER}

LOGIT_MAX_ITER = 50
LOGIT_SCORE_TOL = 1e-8
LOGIT_DEVIANCE_RTOL = 1e-10
LOGIT_ETA_LIMIT = 30.0
# a fitted mu(1 - mu) below this (|eta| beyond about 18) is treated as separation
LOGIT_MIN_WEIGHT = 1e-8


class StatError(ValueError):
    """The statistic cannot be computed for this data/assignment."""


@dataclass(frozen=True)
class StatKind:
    """Which statistic, which factors enter it, and which tail is extreme.

    ``covariates`` (Wald models) and ``strata`` (log-rank) are factor names;
    ``None`` means every factor of the cohort.
    """

    name: str
    covariates: tuple[str, ...] | None = None
    strata: tuple[str, ...] | None = None
    direction: str | None = None

    def __post_init__(self):
        name = self.name.replace("-", "_")
        object.__setattr__(self, "name", name)
        if name not in STAT_NAMES:
            raise ValueError(f"unknown statistic {self.name!r}; expected one of {STAT_NAMES}")
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.strata is not None:
            object.__setattr__(self, "strata", tuple(self.strata))
            if name == "stratified_logrank" and not self.strata:
                raise ValueError("stratified_logrank needs at least one stratum factor")
        if self.direction is None:
            object.__setattr__(self, "direction", _DEFAULT_DIRECTION[name])
        elif self.direction not in (LARGER, SMALLER):
            raise ValueError(f"direction must be {LARGER!r} or {SMALLER!r}")

    def covariate_names(self, cohort: Cohort) -> tuple[str, ...]:
        return tuple(f.name for f in cohort.factors) if self.covariates is None else self.covariates

    def strata_names(self, cohort: Cohort) -> tuple[str, ...]:
        names = tuple(f.name for f in cohort.factors) if self.strata is None else self.strata
        if not names:
            raise StatError("stratified_logrank needs at least one stratum factor")
        return names

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "covariates": None if self.covariates is None else list(self.covariates),
            "strata": None if self.strata is None else list(self.strata),
            "direction": self.direction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StatKind":
        cov = d.get("covariates")
        strata = d.get("strata")
        return cls(
            d["name"],
            None if cov is None else tuple(cov),
            None if strata is None else tuple(strata),
            d.get("direction"),
        )


@dataclass(frozen=True)
class TestStatistic:
    __test__ = False  # not a pytest class

    value: float
    direction: str = LARGER

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise StatError(f"statistic is not finite: {self.value}")

    def at_least_as_extreme(self, other):
        """Boolean (array) of ``other`` being as extreme as this value or more."""
        return _as_extreme(np.asarray(other), self.value, self.direction)


def _tie_tol(observed: float) -> float:
    return 1e-12 * max(1.0, abs(observed))


def _as_extreme(values, observed, direction):
    tol = _tie_tol(observed)
    if direction == LARGER:
        return values >= observed - tol
    return values <= observed + tol


def normal_cdf(x):
    """Standard normal distribution function."""
    return special.ndtr(x)


def normal_quantile(q):
    """Inverse of :func:`normal_cdf` on (0, 1)."""
    arr = np.asarray(q, dtype=np.float64)
    if np.any(~((arr > 0) & (arr < 1))):
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")
    out = special.ndtri(arr)
    return float(out) if out.ndim == 0 else out


# -- design -----------------------------------------------------------------

def covariate_design(cohort: Cohort, names) -> tuple[np.ndarray, list[str]]:
    """Intercept plus treatment-contrast dummies (first level as reference).

    Dummies for levels no subject has are all-zero columns and are dropped;
    the design does not depend on the assignment, so this is stable across
    replicates.
    """
    lv = cohort.levels_matrix()
    cols = [np.ones(cohort.n_subjects)]
    labels = ["(intercept)"]
    for name in names:
        j = cohort.factor_index(name)
        f = cohort.factors[j]
        for k in range(1, f.n_levels):
            col = (lv[:, j] == k).astype(np.float64)
            if col.any():
                cols.append(col)
                labels.append(f"{f.name}[{f.levels[k]}]")
    return np.column_stack(cols), labels


def _check_rank(X: np.ndarray, labels: list[str]) -> None:
    n, p = X.shape
    if n <= p:
        raise StatError(f"need more subjects ({n}) than model parameters ({p})")
    # scan columns left to right; the first one inside the span of its
    # predecessors is reported together with the columns that reproduce it
    scale = np.sqrt((X ** 2).sum(axis=0))
    for j in range(p):
        if j == 0:
            resid, coef = X[:, 0], np.zeros(0)
        else:
            coef, *_ = np.linalg.lstsq(X[:, :j], X[:, j], rcond=None)
            resid = X[:, j] - X[:, :j] @ coef
        if np.linalg.norm(resid) <= 1e-9 * max(scale[j], 1.0):
            partners = [labels[i] for i in range(j) if abs(coef[i]) > 1e-8]
            raise StatError(
                f"design is rank deficient: column {labels[j]!r} is collinear with "
                f"{', '.join(repr(c) for c in partners) if partners else 'nothing (all zero)'}"
            )


def _treatment(cohort: Cohort, assignment) -> np.ndarray:
    if cohort.n_arms != 2:
        raise StatError(f"statistics need exactly 2 arms, cohort has {cohort.n_arms}")
    a = np.asarray(assignment)
    if a.shape != (cohort.n_subjects,):
        raise StatError("assignment length differs from cohort size")
    return (a == 1).astype(np.float64)


def _responses(cohort: Cohort, kind: str):
    need = {"wald_linear": "continuous", "wald_logistic": "binary", "stratified_logrank": "survival"}[kind]
    if cohort.outcome_kind != need or any(s.response is None for s in cohort.subjects):
        raise StatError(f"{need} outcome required")
    return cohort.response_arrays()


# -- linear -----------------------------------------------------------------

def wald_linear(cohort: Cohort, assignment, kind: StatKind) -> TestStatistic:
    """OLS Wald z of the treatment coefficient (unbiased residual variance)."""
    y, _ = _responses(cohort, "wald_linear")
    t = _treatment(cohort, assignment)
    Z, labels = covariate_design(cohort, kind.covariate_names(cohort))
    X = np.column_stack([Z[:, :1], t, Z[:, 1:]])
    labels = [labels[0], "treatment"] + labels[1:]
    _check_rank(X, labels)
    n, p = X.shape
    Q, R = np.linalg.qr(X)
    beta = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ beta
    sigma2 = float(resid @ resid) / (n - p)
    if sigma2 <= 1e-24 * max(1.0, float(y @ y)):
        raise StatError("residual variance is zero; Wald statistic is degenerate")
    Rinv = np.linalg.solve(R, np.eye(p))
    var_t = sigma2 * float(Rinv[1] @ Rinv[1])
    return TestStatistic(float(beta[1] / math.sqrt(var_t)), kind.direction)


class LinearEvaluator:
    """Batched OLS Wald statistic by partialling the fixed covariates out once.

    With ``M`` the residual-maker of the covariate design ``Z``, the treatment
    coefficient is ``t'My / t'Mt`` and its variance ``s^2 / t'Mt``; only
    ``t'My``, ``t't`` and ``Q't`` depend on the assignment.
    """

    def __init__(self, cohort: Cohort, kind: StatKind):
        y, _ = _responses(cohort, "wald_linear")
        Z, labels = covariate_design(cohort, kind.covariate_names(cohort))
        _check_rank(Z, labels)
        self.direction = kind.direction
        self.n, q = Z.shape
        self.df = self.n - q - 1
        if self.df <= 0:
            raise StatError(f"need more subjects ({self.n}) than model parameters ({q + 1})")
        Q, _ = np.linalg.qr(Z)
        self.y_resid = y - Q @ (Q.T @ y)
        self.yy = float(self.y_resid @ self.y_resid)
        self.proj = np.ascontiguousarray(np.column_stack([self.y_resid, Q]))

    def evaluate(self, assignments: np.ndarray) -> np.ndarray:
        T = np.asarray(assignments == 1, dtype=np.float64)
        P = T @ self.proj
        ty = P[:, 0]
        tt = T.sum(axis=1)
        tmt = tt - (P[:, 1:] ** 2).sum(axis=1)
        if np.any(tmt <= 1e-9 * np.maximum(tt, 1.0)):
            raise StatError("design is rank deficient: treatment is collinear with the covariates")
        beta = ty / tmt
        rss = self.yy - beta * ty
        sigma2 = rss / self.df
        if np.any(sigma2 <= 1e-24 * max(1.0, self.yy)):
            raise StatError("residual variance is zero; Wald statistic is degenerate")
        return beta / np.sqrt(sigma2 / tmt)


# -- logistic ---------------------------------------------------------------

def _expit(eta):
    return special.expit(eta)


def _logit_deviance(y, mu):
    mu = np.clip(mu, 1e-300, 1 - 1e-16)
    return -2.0 * np.sum(y * np.log(mu) + (1 - y) * np.log1p(-mu), axis=-1)


def wald_logistic(cohort: Cohort, assignment, kind: StatKind) -> TestStatistic:
    """Logit MLE by IRLS; Wald z of the treatment coefficient from the information."""
    y, _ = _responses(cohort, "wald_logistic")
    if y.min() == y.max():
        raise StatError("binary response has a single value; logistic model not identified")
    t = _treatment(cohort, assignment)
    Z, labels = covariate_design(cohort, kind.covariate_names(cohort))
    X = np.column_stack([Z[:, :1], t, Z[:, 1:]])
    _check_rank(X, [labels[0], "treatment"] + labels[1:])
    beta = np.zeros(X.shape[1])
    dev = _logit_deviance(y, _expit(X @ beta))
    for _ in range(LOGIT_MAX_ITER):
        eta = X @ beta
        mu = _expit(eta)
        w = mu * (1 - mu)
        info = X.T @ (X * w[:, None])
        beta = beta + np.linalg.solve(info, X.T @ (y - mu))
        eta = X @ beta
        if np.max(np.abs(eta)) > LOGIT_ETA_LIMIT:
            raise StatError("logistic fit diverges: possible separation")
        mu = _expit(eta)
        score = X.T @ (y - mu)
        new_dev = _logit_deviance(y, mu)
        done = np.max(np.abs(score)) < LOGIT_SCORE_TOL or abs(new_dev - dev) < LOGIT_DEVIANCE_RTOL * (abs(new_dev) + 0.1)
        dev = new_dev
        if done:
            break
    else:
        raise StatError(f"logistic fit did not converge in {LOGIT_MAX_ITER} iterations: possible separation")
    w = mu * (1 - mu)
    if w.min() < LOGIT_MIN_WEIGHT:
        raise StatError("fitted probabilities of 0 or 1: separation in the logistic model")
    cov = np.linalg.inv(X.T @ (X * w[:, None]))
    return TestStatistic(float(beta[1] / math.sqrt(cov[1, 1])), kind.direction)


class LogisticEvaluator:
    """Batched IRLS: every replicate in the batch is fitted simultaneously."""

    def __init__(self, cohort: Cohort, kind: StatKind):
        y, _ = _responses(cohort, "wald_logistic")
        if y.min() == y.max():
            raise StatError("binary response has a single value; logistic model not identified")
        Z, labels = covariate_design(cohort, kind.covariate_names(cohort))
        _check_rank(Z, labels)
        self.y = y
        self.Z = Z
        self.direction = kind.direction

    def evaluate(self, assignments: np.ndarray) -> np.ndarray:
        T = np.asarray(assignments == 1, dtype=np.float64)
        R, n = T.shape
        X = np.empty((R, n, self.Z.shape[1] + 1))
        X[:, :, 0] = 1.0
        X[:, :, 1] = T
        X[:, :, 2:] = self.Z[None, :, 1:]
        p = X.shape[2]
        y = self.y
        beta = np.zeros((R, p))
        dev = np.full(R, _logit_deviance(y, np.full(n, 0.5)))
        active = np.ones(R, dtype=bool)
        for _ in range(LOGIT_MAX_ITER):
            idx = np.flatnonzero(active)
            Xa = X[idx]
            b = beta[idx]
            mu = _expit(np.einsum("rnp,rp->rn", Xa, b))
            w = mu * (1 - mu)
            info = np.einsum("rni,rn,rnj->rij", Xa, w, Xa)
            score = np.einsum("rni,rn->ri", Xa, y[None, :] - mu)
            try:
                step = np.linalg.solve(info, score[..., None])[..., 0]
            except np.linalg.LinAlgError:
                raise StatError("logistic information matrix is singular: possible separation") from None
            b = b + step
            eta = np.einsum("rnp,rp->rn", Xa, b)
            if np.any(np.abs(eta) > LOGIT_ETA_LIMIT):
                raise StatError("logistic fit diverges: possible separation")
            mu = _expit(eta)
            score = np.einsum("rni,rn->ri", Xa, y[None, :] - mu)
            new_dev = _logit_deviance(y[None, :], mu)
            done = (np.max(np.abs(score), axis=1) < LOGIT_SCORE_TOL) | (
                np.abs(new_dev - dev[idx]) < LOGIT_DEVIANCE_RTOL * (np.abs(new_dev) + 0.1)
            )
            beta[idx] = b
            dev[idx] = new_dev
            active[idx[done]] = False
            if not active.any():
                break
        else:
            raise StatError(f"logistic fit did not converge in {LOGIT_MAX_ITER} iterations: possible separation")
        mu = _expit(np.einsum("rnp,rp->rn", X, beta))
        w = mu * (1 - mu)
        if w.min() < LOGIT_MIN_WEIGHT:
            raise StatError("fitted probabilities of 0 or 1: separation in the logistic model")
        info = np.einsum("rni,rn,rnj->rij", X, w, X)
        cov11 = np.linalg.inv(info)[:, 1, 1]
        return beta[:, 1] / np.sqrt(cov11)


# -- stratified log-rank ------------------------------------------------------

def _strata_codes(cohort: Cohort, names) -> np.ndarray:
    lv = cohort.levels_matrix()
    code = np.zeros(cohort.n_subjects, dtype=np.int64)
    for name in names:
        j = cohort.factor_index(name)
        code = code * cohort.factors[j].n_levels + lv[:, j]
    return code


def stratified_logrank(cohort: Cohort, assignment, kind: StatKind) -> TestStatistic:
    """Sum over strata of observed-minus-expected arm-1 events over the pooled SD.

    Tied event times share one risk set (everyone with time >= t).
    """
    time, event = _responses(cohort, "stratified_logrank")
    t = _treatment(cohort, assignment)
    if not event.any():
        raise StatError("no events")
    codes = _strata_codes(cohort, kind.strata_names(cohort))
    o_minus_e = 0.0
    var = 0.0
    for s in np.unique(codes):
        m = codes == s
        ts, es, arm = time[m], event[m], t[m]
        for tj in np.unique(ts[es]):
            at_risk = ts >= tj
            n_j = at_risk.sum()
            n1_j = arm[at_risk].sum()
            dead = (ts == tj) & es
            d_j = dead.sum()
            d1_j = arm[dead].sum()
            o_minus_e += d1_j - d_j * n1_j / n_j
            if n_j > 1:
                var += d_j * (n1_j / n_j) * (1 - n1_j / n_j) * (n_j - d_j) / (n_j - 1)
    if var <= 0:
        raise StatError("log-rank variance is zero")
    return TestStatistic(float(o_minus_e / math.sqrt(var)), kind.direction)


class LogrankEvaluator:
    """Batched stratified log-rank via fixed risk-set and death indicator matrices.

    Column ``j`` is one (stratum, distinct event time) pair; ``T @ atrisk``
    gives arm-1 numbers at risk and ``T @ deaths`` arm-1 deaths for every
    replicate at once.
    """

    def __init__(self, cohort: Cohort, kind: StatKind):
        time, event = _responses(cohort, "stratified_logrank")
        if cohort.n_arms != 2:
            raise StatError(f"statistics need exactly 2 arms, cohort has {cohort.n_arms}")
        if not event.any():
            raise StatError("no events")
        codes = _strata_codes(cohort, kind.strata_names(cohort))
        risk_cols, death_cols, n_j, d_j = [], [], [], []
        for s in np.unique(codes):
            m = codes == s
            for tj in np.unique(time[m & event]):
                at_risk = m & (time >= tj)
                dead = m & (time == tj) & event
                risk_cols.append(at_risk)
                death_cols.append(dead)
                n_j.append(at_risk.sum())
                d_j.append(dead.sum())
        self.atrisk = np.column_stack(risk_cols).astype(np.float64)
        self.deaths = np.column_stack(death_cols).astype(np.float64)
        self.n_j = np.array(n_j, dtype=np.float64)
        self.d_j = np.array(d_j, dtype=np.float64)
        denom = np.where(self.n_j > 1, self.n_j - 1, 1.0)
        self.var_factor = np.where(self.n_j > 1, self.d_j * (self.n_j - self.d_j) / denom, 0.0)
        self.direction = kind.direction

    def evaluate(self, assignments: np.ndarray) -> np.ndarray:
        T = np.asarray(assignments == 1, dtype=np.float64)
        n1 = T @ self.atrisk
        d1 = T @ self.deaths
        frac = n1 / self.n_j
        o_minus_e = (d1 - self.d_j * frac).sum(axis=1)
        var = (self.var_factor * frac * (1 - frac)).sum(axis=1)
        if np.any(var <= 0):
            raise StatError("log-rank variance is zero")
        return o_minus_e / np.sqrt(var)


_EVALUATORS = {
    "wald_linear": LinearEvaluator,
    "wald_logistic": LogisticEvaluator,
    "stratified_logrank": LogrankEvaluator,
}

_SINGLE = {
    "wald_linear": wald_linear,
    "wald_logistic": wald_logistic,
    "stratified_logrank": stratified_logrank,
}


def make_evaluator(cohort: Cohort, kind: StatKind):
    """Batch evaluator with ``.evaluate(assignments) -> values`` and ``.direction``."""
    if cohort.n_arms != 2:
        raise StatError(f"statistics need exactly 2 arms, cohort has {cohort.n_arms}")
    return _EVALUATORS[kind.name](cohort, kind)


def evaluate_single(cohort: Cohort, assignment, kind: StatKind) -> TestStatistic:
    return _SINGLE[kind.name](cohort, assignment, kind)
