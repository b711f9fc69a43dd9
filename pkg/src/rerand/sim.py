"""Simulation study: data generation, treatment-effect calibration and policy metrics.

Each simulated dataset has 200 subjects over site (50), ECOG (2) and TMB (3)
strata assigned by two-arm minimization.  Outcomes come from the linear
predictor ``l = b_site + b_ecog + b_tmb + b_group * treated`` with normal,
logistic or exponential-time noise.  Noise is drawn once per dataset and
reused for every ``b_group`` (common random numbers), so the re-randomization
p-value of a dataset is a deterministic step function of ``b_group`` and can
be bisected.

Three independent replicate streams serve each dataset: one draw for the
"actual" assignment, a reference stream (``L_ref`` rows; its first ``L_cal``
rows drive calibration and all of it gives the reference p-value) and a
methods stream whose prefixes feed every repetition policy, exactly as the
engine would consume rows under one master seed.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .cohort import Cohort, Outcome, StratumFactor, Subject
from .engine import (
    AdaptivePolicy,
    BernoulliOracle,
    ParametricPolicy,
    PRPolicy,
    ValueReplicates,
    resolve_workers,
    run_policy,
)
from .minimization import BatchRandomizer, MinimizationParams
from .stats import LARGER, StatKind, TestStatistic, covariate_design, make_evaluator, normal_quantile

__all__ = [
    "SimScenario",
    "SimMetrics",
    "SimBetas",
    "SimDataset",
    "CalibrationError",
    "CalibrationResult",
    "StudyResult",
    "METHODS",
    "STUDY_P_GRID",
    "gen_linear_predictor",
    "gen_outcome",
    "gen_outcomes",
    "draw_dataset",
    "calibrate_beta_group",
    "bisect_beta_group",
    "run_study",
    "run_oracle_study",
    "summarize",
    "metrics_csv",
]

METHODS = ("parametric-1000", "parametric-5000", "parametric-10000", "pr", "adaptive")
STUDY_P_GRID = (0.005, 0.007, 0.008, 0.009, 0.011, 0.013, 0.015, 0.020)

SITE_LEVELS = tuple(str(j) for j in range(1, 51))
ECOG_LEVELS = ("0", "1")
TMB_LEVELS = ("<=6", ">6 and <=12", ">12")

_STAT = {
    "continuous": StatKind("wald_linear", covariates=("ecog", "tmb")),
    "binary": StatKind("wald_logistic", covariates=("ecog", "tmb")),
    "survival": StatKind("stratified_logrank", strata=("ecog", "tmb")),
}


class CalibrationError(RuntimeError):
    pass


# -- scenario -------------------------------------------------------------------

@dataclass(frozen=True)
class SimScenario:
    outcome: str = "continuous"
    n_subjects: int = 200
    n_sites: int = 50
    beta_site_mean: float = 0.2
    beta_site_sd: float = 1.0
    beta_ecog: tuple[float, ...] = (0.3, 0.5)
    beta_tmb: tuple[float, ...] = (-0.3, 0.0, 0.3)
    beta_group: float = 0.0
    censor_upper: float = 5.0
    target_p: float | None = None
    n_sim: int = 200
    alpha: float = 0.01
    L_ref: int = 200_000
    L_cal: int = 100_000
    calibration: str = "per_dataset"
    p_best: float = 0.9

    def __post_init__(self):
        for name in ("beta_ecog", "beta_tmb"):
            object.__setattr__(self, name, tuple(float(b) for b in getattr(self, name)))
        if self.outcome not in _STAT:
            raise ValueError(f"outcome must be one of {sorted(_STAT)}, got {self.outcome!r}")
        if len(self.beta_ecog) != len(ECOG_LEVELS) or len(self.beta_tmb) != len(TMB_LEVELS):
            raise ValueError("beta_ecog needs 2 entries and beta_tmb 3")
        if not 2 <= self.n_sites <= len(SITE_LEVELS):
            raise ValueError(f"n_sites must lie in [2, {len(SITE_LEVELS)}]")
        n_params = 1 + 1 + (len(ECOG_LEVELS) - 1) + (len(TMB_LEVELS) - 1)
        if self.n_subjects <= n_params:
            raise ValueError(f"n_subjects must exceed the {n_params} model parameters")
        if not self.censor_upper > 0:
            raise ValueError("censor_upper must be positive")
        if self.target_p is not None and not 0 < self.target_p < 1:
            raise ValueError("target_p must lie in (0, 1)")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_sim < 1 or self.L_ref < 1 or not 1 <= self.L_cal <= self.L_ref:
            raise ValueError("need n_sim >= 1 and 1 <= L_cal <= L_ref")
        if self.calibration not in ("per_dataset", "scenario", "fixed"):
            raise ValueError("calibration must be 'per_dataset', 'scenario' or 'fixed'")

    @property
    def stat(self) -> StatKind:
        return _STAT[self.outcome]

    def full_scale(self) -> "SimScenario":
        return replace(self, n_sim=1000, L_ref=1_000_000, L_cal=1_000_000)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimScenario":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SimScenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class SimMetrics:
    L_bar: float
    L_max: int
    L_min: int
    P_max_pct: float | None
    CP_pct: float

    def __post_init__(self):
        if not self.L_min <= self.L_bar <= self.L_max:
            raise ValueError("need L_min <= L_bar <= L_max")
        for v in (self.P_max_pct, self.CP_pct):
            if v is not None and not 0 <= v <= 100:
                raise ValueError("percentages must lie in [0, 100]")


@dataclass(frozen=True)
class SimBetas:
    site: np.ndarray
    ecog: np.ndarray
    tmb: np.ndarray
    group: float = 0.0


# -- data generation ------------------------------------------------------------

def gen_linear_predictor(subject, betas: SimBetas, arm: int) -> float:
    """Site + ECOG + TMB coefficients, plus ``betas.group`` for the treated arm."""
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    levels = subject.factor_levels if isinstance(subject, Subject) else subject
    site, ecog, tmb = levels
    return float(betas.site[site] + betas.ecog[ecog] + betas.tmb[tmb] + (betas.group if arm == 1 else 0.0))


def _outcome_arrays(l, kind: str, noise: dict, censor_upper: float):
    if kind == "continuous":
        return l + noise["e"], None
    if kind == "binary":
        return (noise["u"] < special.expit(l)).astype(np.float64), None
    if kind == "survival":
        t = np.exp(l) * -np.log(noise["u"])
        c = censor_upper * noise["v"]
        return np.minimum(t, c), t < c
    raise ValueError(f"unknown outcome kind {kind!r}")


def _draw_noise(kind: str, n: int, rng: np.random.Generator) -> dict:
    if kind == "continuous":
        return {"e": rng.standard_normal(n)}
    if kind == "binary":
        return {"u": rng.random(n)}
    # 1 - U keeps both uniforms strictly positive (log, nonzero censoring time)
    return {"u": 1.0 - rng.random(n), "v": 1.0 - rng.random(n)}


def gen_outcomes(l, kind: str, rng: np.random.Generator, censor_upper: float = 5.0):
    """Vectorized outcomes: ``(y, event)`` arrays (``event`` is None unless survival)."""
    l = np.asarray(l, dtype=np.float64)
    return _outcome_arrays(l, kind, _draw_noise(kind, l.size, rng), censor_upper)


def gen_outcome(l: float, kind: str, rng: np.random.Generator, censor_upper: float = 5.0) -> Outcome:
    y, ev = gen_outcomes(np.array([l]), kind, rng, censor_upper)
    return Outcome(kind, float(y[0]), None if ev is None else bool(ev[0]))


def sim_params(p_best: float = 0.9) -> MinimizationParams:
    """Equal weights over the three factors, 1:1, biased-coin probability ``p_best``."""
    return MinimizationParams(weights=(1.0, 1.0, 1.0), ratio=(1, 1), p_best=p_best)


def sim_factors(n_sites: int = 50) -> tuple[StratumFactor, ...]:
    return (
        StratumFactor("site", SITE_LEVELS[:n_sites]),
        StratumFactor("ecog", ECOG_LEVELS),
        StratumFactor("tmb", TMB_LEVELS),
    )


def _dataset_keys(seed: int, index: int) -> np.ndarray:
    # data rng entropy, actual-assignment key, reference key, methods key
    return np.random.SeedSequence([int(seed), int(index)]).generate_state(4, dtype=np.uint64)


@dataclass
class SimDataset:
    """Covariates, actual assignment and fixed noise of one simulated trial."""

    scenario: SimScenario
    index: int
    levels: np.ndarray
    arms: np.ndarray
    betas: SimBetas
    base: np.ndarray
    noise: dict
    ref_key: int
    methods_key: int
    covariates: Cohort = field(repr=False)

    def treated(self) -> np.ndarray:
        return (self.arms == 1).astype(np.float64)

    def predictor(self, beta_group: float) -> np.ndarray:
        return self.base + beta_group * self.treated()

    def outcomes(self, beta_group: float):
        return _outcome_arrays(self.predictor(beta_group), self.scenario.outcome, self.noise,
                               self.scenario.censor_upper)

    def cohort(self, beta_group: float) -> Cohort:
        y, ev = self.outcomes(beta_group)
        kind = self.scenario.outcome
        resp = [Outcome(kind, float(y[i]), None if ev is None else bool(ev[i])) for i in range(len(y))]
        return self.covariates.with_responses(resp)


def draw_dataset(scenario: SimScenario, seed: int, index: int = 0) -> SimDataset:
    keys = _dataset_keys(seed, index)
    rng = np.random.default_rng(int(keys[0]))
    n = scenario.n_subjects
    levels = np.column_stack([
        rng.integers(0, scenario.n_sites, n),
        rng.integers(0, len(ECOG_LEVELS), n),
        rng.integers(0, len(TMB_LEVELS), n),
    ]).astype(np.int64)
    betas = SimBetas(
        site=rng.normal(scenario.beta_site_mean, scenario.beta_site_sd, scenario.n_sites),
        ecog=np.asarray(scenario.beta_ecog),
        tmb=np.asarray(scenario.beta_tmb),
        group=scenario.beta_group,
    )
    noise = _draw_noise(scenario.outcome, n, rng)
    factors = sim_factors(scenario.n_sites)
    subjects = [Subject(f"S{i + 1:04d}", tuple(int(v) for v in levels[i])) for i in range(n)]
    cov = Cohort(factors, subjects)
    arms = BatchRandomizer(cov, sim_params(scenario.p_best)).batch(int(keys[1]), 0, 1)[0]
    cov = cov.with_arms(arms.tolist())
    base = betas.site[levels[:, 0]] + betas.ecog[levels[:, 1]] + betas.tmb[levels[:, 2]]
    return SimDataset(scenario, index, levels, arms, betas, base, noise, int(keys[2]), int(keys[3]), cov)


# -- statistic as a function of beta_group ----------------------------------------

class _LinearSweep:
    """OLS Wald statistics of many replicates for any ``beta_group`` in closed form.

    ``y = y0 + b d`` with ``d`` the actual treatment indicator, so for replicate
    indicator ``t`` and covariate residual-maker ``M``: ``t'My = A + bB``,
    ``y'My = S00 + 2b S01 + b^2 S11`` and the Wald statistic follows from
    ``t'Mt`` alone.
    """

    def __init__(self, ds: SimDataset, key: int, n_rows: int, chunk: int = 10_000, workers: int = 1):
        Z, _ = covariate_design(ds.covariates, ds.scenario.stat.covariate_names(ds.covariates))
        Q, _ = np.linalg.qr(Z)
        self.df = Z.shape[0] - Z.shape[1] - 1
        y0, _ = _outcome_arrays(ds.base, "continuous", ds.noise, ds.scenario.censor_upper)
        d = ds.treated()
        my0 = y0 - Q @ (Q.T @ y0)
        md = d - Q @ (Q.T @ d)
        self.S = (float(my0 @ my0), float(my0 @ md), float(md @ md))
        self.proj = np.ascontiguousarray(np.column_stack([my0, md, Q]))
        self.direction = ds.scenario.stat.direction
        self.obs = self._parts(d[None, :])
        rnd = BatchRandomizer(ds.covariates, sim_params(ds.scenario.p_best))

        def part(start):
            return self._parts(rnd.batch(key, start, min(chunk, n_rows - start)) == 1)

        starts = range(0, n_rows, chunk)
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(part, starts))
        else:
            parts = [part(s) for s in starts]
        self.A, self.B, self.D = (np.concatenate([p[i] for p in parts]) for i in range(3))

    def _parts(self, T):
        T = np.asarray(T, dtype=np.float64)
        P = T @ self.proj
        return P[:, 0], P[:, 1], T.sum(axis=1) - (P[:, 2:] ** 2).sum(axis=1)

    def _stat(self, A, B, D, b):
        ty = A + b * B
        s00, s01, s11 = self.S
        yy = s00 + 2 * b * s01 + b * b * s11
        rss = yy - ty * ty / D
        return ty / np.sqrt(D) / np.sqrt(rss / self.df)

    def observed(self, b: float) -> TestStatistic:
        return TestStatistic(float(self._stat(*self.obs, b)[0]), self.direction)

    def values(self, b: float, stop: int | None = None) -> np.ndarray:
        s = slice(0, stop)
        return self._stat(self.A[s], self.B[s], self.D[s], b)


class _GenericSweep:
    """Fallback: keep the replicate rows and re-evaluate the statistic per ``beta_group``."""

    def __init__(self, ds: SimDataset, key: int, n_rows: int, chunk: int = 10_000, workers: int = 1):
        self.ds = ds
        self.rows = BatchRandomizer(ds.covariates, sim_params(ds.scenario.p_best)).batch(key, 0, n_rows)
        self.chunk = chunk
        self._cache: dict = {}

    def _eval(self, b: float):
        # only the most recent beta is kept; values grow lazily by prefix
        if self._cache.get("b") != b:
            ev = make_evaluator(self.ds.cohort(b), self.ds.scenario.stat)
            obs = TestStatistic(float(ev.evaluate(self.ds.arms[None, :])[0]), ev.direction)
            self._cache = {"b": b, "ev": ev, "obs": obs, "v": np.empty(0)}
        return self._cache

    def observed(self, b: float) -> TestStatistic:
        return self._eval(b)["obs"]

    def values(self, b: float, stop: int | None = None) -> np.ndarray:
        c = self._eval(b)
        stop = len(self.rows) if stop is None else stop
        have = c["v"]
        if len(have) < stop:
            parts = [have]
            for s in range(len(have), stop, self.chunk):
                parts.append(c["ev"].evaluate(self.rows[s:min(stop, s + self.chunk)]))
            c["v"] = have = np.concatenate(parts)
        return have[:stop]


def _sweep(ds: SimDataset, key: int, n_rows: int, workers: int = 1):
    cls = _LinearSweep if ds.scenario.outcome == "continuous" else _GenericSweep
    return cls(ds, key, n_rows, workers=workers)


def _p_hat(sweep, b: float, L: int | None = None) -> float:
    vals = sweep.values(b, L)
    return float(np.count_nonzero(sweep.observed(b).at_least_as_extreme(vals))) / len(vals)


# -- calibration ------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationResult:
    beta_group: float
    p_hat: float
    steps: int
    converged: bool


def bisect_beta_group(objective: Callable[[float], float], target_p: float, lo: float = -3.0,
                      hi: float = 3.0, rel_tol: float = 0.1, max_steps: int = 20) -> CalibrationResult:
    """Bisect a monotone step function ``objective(beta) -> p`` onto ``target_p``.

    Stops once ``|p - target_p| < rel_tol * target_p`` or after ``max_steps``
    midpoints; the direction of monotonicity is read from the bracket ends.
    """
    if not 0 < target_p < 1:
        raise ValueError("target_p must lie in (0, 1)")
    f_lo, f_hi = objective(lo), objective(hi)
    if not min(f_lo, f_hi) <= target_p <= max(f_lo, f_hi):
        raise CalibrationError(
            f"bracket not found: p-value spans [{min(f_lo, f_hi):.6g}, {max(f_lo, f_hi):.6g}] "
            f"over beta_group in [{lo}, {hi}], target {target_p}"
        )
    decreasing = f_lo >= f_hi
    tol = rel_tol * target_p
    for step in range(1, max_steps + 1):
        mid = 0.5 * (lo + hi)
        f = objective(mid)
        if abs(f - target_p) < tol:
            return CalibrationResult(mid, f, step, True)
        if (f > target_p) == decreasing:
            lo = mid
        else:
            hi = mid
    return CalibrationResult(mid, f, max_steps, False)


def calibrate_beta_group(scenario: SimScenario, target_p: float, seed: int = 0,
                         n_datasets: int = 1, L: int | None = None, workers: int = 1) -> CalibrationResult:
    """``beta_group`` giving re-randomization p-value ``target_p``.

    With ``n_datasets = 1`` the objective is the fixed-L p-value of one
    reference dataset (its first ``L`` reference rows, default
    ``scenario.L_cal``).  With several datasets it is their mean p-value,
    which calibrates a single effect for the whole scenario.
    """
    L = scenario.L_cal if L is None else L
    sweeps = []
    for i in range(n_datasets):
        ds = draw_dataset(scenario, seed, i)
        sweeps.append(_sweep(ds, ds.ref_key, L, workers))
    return bisect_beta_group(lambda b: float(np.mean([_p_hat(s, b) for s in sweeps])), target_p)


# -- study ----------------------------------------------------------------------

def _method_policy(name: str):
    if name == "pr":
        return PRPolicy()
    if name == "adaptive":
        return AdaptivePolicy()
    if name.startswith("parametric-"):
        return ParametricPolicy(int(name.split("-", 1)[1]))
    raise ValueError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")


@dataclass
class StudyResult:
    scenario: SimScenario
    methods: tuple[str, ...]
    seed: int
    records: list[dict]
    metrics: dict = field(default_factory=dict)  # (target, method) -> SimMetrics

    def to_csv(self) -> str:
        return metrics_csv(self.metrics)

    def metadata(self) -> dict:
        return {"scenario": self.scenario.to_dict(), "methods": list(self.methods), "seed": self.seed}


def summarize(L: Sequence[int], decisions: Sequence[bool], reference: Sequence[bool],
              l_max: int | None = None) -> SimMetrics:
    L = np.asarray(L)
    agree = np.asarray(decisions) == np.asarray(reference)
    p_max = None if l_max is None else float(100.0 * np.mean(L == l_max))
    return SimMetrics(float(L.mean()), int(L.max()), int(L.min()), p_max, float(100.0 * agree.mean()))


def metrics_csv(metrics: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p", "Method", "L_bar", "L_max", "L_min", "P_max_pct", "CP_pct"])
    for (target, method), m in metrics.items():
        w.writerow([
            "" if target is None else f"{target:g}",
            method,
            f"{m.L_bar:.1f}",
            m.L_max,
            m.L_min,
            "" if m.P_max_pct is None else f"{m.P_max_pct:.1f}",
            f"{m.CP_pct:.1f}",
        ])
    return buf.getvalue()


def _run_dataset(scenario: SimScenario, methods, seed: int, index: int, targets, fixed_beta) -> list[dict]:
    ds = draw_dataset(scenario, seed, index)
    alpha = scenario.alpha
    policies = {m: _method_policy(m) for m in methods}
    n_methods = max(p.max_reps(alpha) for p in policies.values())
    ref = _sweep(ds, ds.ref_key, scenario.L_ref)
    mth = _sweep(ds, ds.methods_key, n_methods)
    out = []
    for target in targets:
        if target is None:
            beta, p_cal = fixed_beta[None], None
        elif scenario.calibration == "per_dataset":
            cal = bisect_beta_group(lambda b: _p_hat(ref, b, scenario.L_cal), target)
            beta, p_cal = cal.beta_group, cal.p_hat
        else:
            beta, p_cal = fixed_beta[target], None
        rec = {"dataset": index, "target": target, "beta_group": beta, "p_cal": p_cal,
               "p_ref": _p_hat(ref, beta)}
        observed = mth.observed(beta)
        source = ValueReplicates(mth.values(beta))
        for name, pol in policies.items():
            rep = run_policy(source, observed, pol, alpha)
            rec[name] = {"L": rep.L_used, "p": rep.p_value, "significant": rep.significant}
        out.append(rec)
    return out


def run_study(scenario: SimScenario, methods: Sequence[str] = METHODS, seed: int = 0,
              targets: Sequence[float | None] | None = None, workers=1,
              progress: Callable[[int, int], None] | None = None) -> StudyResult:
    """Run every method on ``scenario.n_sim`` datasets for each target p-value.

    ``targets`` defaults to ``[scenario.target_p]``; ``None`` as a target
    uses the fixed ``scenario.beta_group``.  Per-dataset calibration (the
    default) bisects ``beta_group`` on each dataset's own reference rows;
    ``"scenario"`` calibration fits one effect on the mean p-value of a
    separate pilot set of datasets.
    """
    methods = tuple(methods)
    for m in methods:
        _method_policy(m)
    if targets is None:
        targets = [scenario.target_p]
    targets = list(targets)
    if scenario.calibration == "fixed":
        targets = [None]
    fixed_beta = {None: scenario.beta_group}
    if scenario.calibration == "scenario":
        for t in targets:
            if t is not None:
                pilot = calibrate_beta_group(scenario, t, seed=seed + 1_000_003, n_datasets=min(20, scenario.n_sim))
                fixed_beta[t] = pilot.beta_group
    workers = resolve_workers(workers)

    def job(i):
        return _run_dataset(scenario, methods, seed, i, targets, fixed_beta)

    records: list[dict] = []
    done = 0
    with ThreadPoolExecutor(workers) as pool:
        for recs in pool.map(job, range(scenario.n_sim)):
            records.extend(recs)
            done += 1
            if progress:
                progress(done, scenario.n_sim)
    result = StudyResult(scenario, methods, seed, records)
    for t in targets:
        rows = [r for r in records if r["target"] == t]
        ref_dec = [r["p_ref"] <= scenario.alpha for r in rows]
        for m in methods:
            l_max = AdaptivePolicy().max_reps(scenario.alpha) if m == "adaptive" else None
            result.metrics[(t, m)] = summarize([r[m]["L"] for r in rows], [r[m]["significant"] for r in rows],
                                               ref_dec, l_max)
    return result


# -- Bernoulli-oracle study ---------------------------------------------------------

def run_oracle_study(p_grid: Sequence[float] = STUDY_P_GRID, methods: Sequence[str] = METHODS,
                     alpha: float = 0.01, n_sim: int = 1000, seed: int = 0) -> dict:
    """Policy metrics with the statistic replaced by known-p oracles.

    Exceedances are i.i.d. Bernoulli(p) for the count-based methods; the
    parametric methods see a standard normal null sample with the observed
    value at its upper ``p`` quantile.  The reference decision uses the true
    ``p``.
    """
    metrics = {}
    for p in p_grid:
        ref = [p <= alpha] * n_sim
        for name in methods:
            pol = _method_policy(name)
            L, dec = [], []
            for i in range(n_sim):
                sim_seed = int(np.random.SeedSequence([seed, int(round(p * 1e6)), i]).generate_state(1, np.uint64)[0])
                if isinstance(pol, ParametricPolicy):
                    rng = np.random.default_rng(sim_seed)
                    obs = TestStatistic(float(normal_quantile(1.0 - p)), LARGER)
                    rep = run_policy(ValueReplicates(rng.standard_normal(pol.L)), obs, pol, alpha)
                else:
                    oracle = BernoulliOracle(p, sim_seed)
                    rep = run_policy(oracle, oracle.observed, pol, alpha, chunk=100_000)
                L.append(rep.L_used)
                dec.append(rep.significant)
            l_max = pol.max_reps(alpha) if name == "adaptive" else None
            metrics[(p, name)] = summarize(L, dec, ref, l_max)
    return metrics
