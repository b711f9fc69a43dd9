"""Run a re-randomization test: observed statistic, replicates, exceedances, policy.

Replicate ``r`` is always drawn from stream ``(master_seed, r)`` and chunks
are aligned to absolute replicate indices, so the exceedance count after any
number of replicates is the same for every worker count and for stored
versus freshly generated assignments.  Within a batch chunks run on a thread
pool (the randomization kernel and the BLAS products release the GIL); the
policy loop across batches is sequential.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .cohort import Cohort, CohortError, validate_for_test
from .minimization import BatchRandomizer, MinimizationParams
from .policy import (
    EXHAUSTED,
    AdaptiveParams,
    adaptive_step,
    parametric_pvalue,
    pr_repetitions,
)
from .rng import first_uniforms
from .stats import LARGER, StatKind, TestStatistic, make_evaluator
from .store import ReplicateStore, StoreError

__all__ = [
    "EngineError",
    "FixedPolicy",
    "PRPolicy",
    "ParametricPolicy",
    "AdaptivePolicy",
    "parse_policy",
    "RerandConfig",
    "RerandReport",
    "GeneratedReplicates",
    "StoredReplicates",
    "ValueReplicates",
    "BernoulliOracle",
    "resolve_workers",
    "run_policy",
    "run_test",
    "run_with_store",
    "REPORT_SCHEMA_VERSION",
]

REPORT_SCHEMA_VERSION = 1
DEFAULT_CHUNK = 500


class EngineError(RuntimeError):
    pass


# -- policies -----------------------------------------------------------------

@dataclass(frozen=True)
class FixedPolicy:
    L: int
    name = "fixed"

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("fixed policy needs L >= 1")

    def max_reps(self, alpha: float) -> int:
        return self.L

    def to_dict(self, alpha: float) -> dict:
        return {"name": self.name, "L": self.L}


@dataclass(frozen=True)
class PRPolicy:
    full_precision: bool = False
    name = "pr"

    def max_reps(self, alpha: float) -> int:
        return pr_repetitions(alpha, self.full_precision)

    def to_dict(self, alpha: float) -> dict:
        return {"name": self.name, "L": self.max_reps(alpha), "full_precision": self.full_precision}


@dataclass(frozen=True)
class ParametricPolicy:
    L: int = 10_000
    name = "parametric"

    def __post_init__(self):
        if self.L < 30:
            raise ValueError("parametric policy needs L >= 30")

    def max_reps(self, alpha: float) -> int:
        return self.L

    def to_dict(self, alpha: float) -> dict:
        return {"name": self.name, "L": self.L}


@dataclass(frozen=True)
class AdaptivePolicy:
    delta_u: float = 0.1
    delta_l: float = 0.1
    rho_u: float = 0.99
    rho_l: float = 0.99
    batch: int = 1000
    l_max: int | str = "auto"
    name = "adaptive"

    def params(self, alpha: float) -> AdaptiveParams:
        return AdaptiveParams(alpha, self.delta_u, self.delta_l, self.rho_u, self.rho_l, self.batch, self.l_max)

    def max_reps(self, alpha: float) -> int:
        return self.params(alpha).max_reps

    def to_dict(self, alpha: float) -> dict:
        return {"name": self.name} | self.params(alpha).to_dict()


def parse_policy(text: str, **adaptive) -> FixedPolicy | PRPolicy | ParametricPolicy | AdaptivePolicy:
    """``fixed:L``, ``pr``, ``parametric:L`` or ``adaptive``."""
    name, _, arg = text.strip().partition(":")
    name = name.lower()
    try:
        if name == "fixed":
            return FixedPolicy(int(arg))
        if name == "pr":
            if arg:
                raise ValueError("pr takes no argument")
            return PRPolicy()
        if name == "parametric":
            return ParametricPolicy(int(arg)) if arg else ParametricPolicy()
        if name == "adaptive":
            if arg:
                raise ValueError("adaptive takes no argument")
            return AdaptivePolicy(**{k: v for k, v in adaptive.items() if v is not None})
    except ValueError as exc:
        raise ValueError(f"bad policy {text!r}: {exc}") from None
    raise ValueError(f"unknown policy {text!r}; expected fixed:L, pr, parametric:L or adaptive")


def policy_from_dict(d: dict):
    d = dict(d)
    name = d.pop("name")
    if name == "fixed":
        return FixedPolicy(int(d["L"]))
    if name == "pr":
        return PRPolicy(bool(d.get("full_precision", False)))
    if name == "parametric":
        return ParametricPolicy(int(d["L"]))
    if name == "adaptive":
        d.pop("alpha", None)
        return AdaptivePolicy(**d)
    raise ValueError(f"unknown policy {name!r}")


# -- config and report ------------------------------------------------------------

def resolve_workers(workers) -> int:
    if workers is None:
        workers = os.environ.get("RERAND_WORKERS", "1")
    if workers == "auto":
        return os.cpu_count() or 1
    n = int(workers)
    if n < 1:
        raise ValueError("workers must be a positive integer or 'auto'")
    return n


@dataclass(frozen=True)
class RerandConfig:
    stat: StatKind
    policy: FixedPolicy | PRPolicy | ParametricPolicy | AdaptivePolicy
    alpha: float
    master_seed: int = 0
    workers: int | str = 1
    store_path: str | None = None
    minimization: MinimizationParams | None = None
    chunk: int = DEFAULT_CHUNK

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")

    def resolved(self, cohort: Cohort) -> "RerandConfig":
        params = self.minimization or MinimizationParams.for_cohort(cohort)
        return replace(self, minimization=params, workers=resolve_workers(self.workers))

    def to_dict(self) -> dict:
        return {
            "stat": self.stat.to_dict(),
            "policy": self.policy.to_dict(self.alpha),
            "alpha": self.alpha,
            "master_seed": int(self.master_seed),
            "workers": self.workers,
            "store_path": self.store_path,
            "minimization": None if self.minimization is None else self.minimization.to_dict(),
            "chunk": self.chunk,
        }


@dataclass
class RerandReport:
    observed: float
    direction: str
    L_used: int
    m: int
    p_hat: float
    significant: bool
    p_value: float
    policy_trace: list[dict]
    wall_time: float
    replicate_throughput: float
    config: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    TIMING_FIELDS = ("wall_time", "replicate_throughput")

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "schema_version": self.schema_version,
            "observed": self.observed,
            "direction": self.direction,
            "L_used": self.L_used,
            "m": self.m,
            "p_hat": self.p_hat,
            "p_value": self.p_value,
            "significant": self.significant,
            "policy_trace": self.policy_trace,
            "wall_time": self.wall_time,
            "replicate_throughput": self.replicate_throughput,
            "config": self.config,
        }
        if not timing:
            for k in self.TIMING_FIELDS:
                d.pop(k)
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw), indent=2, sort_keys=True)


# -- replicate sources ------------------------------------------------------------

class GeneratedReplicates:
    """Statistic values of freshly drawn replicates."""

    def __init__(self, cohort: Cohort, params: MinimizationParams, master_seed: int, evaluator):
        self.randomizer = BatchRandomizer(cohort, params)
        self.master_seed = int(master_seed)
        self.evaluator = evaluator

    def capacity(self) -> int | None:
        return None

    def values(self, start: int, count: int) -> np.ndarray:
        return self.evaluator.evaluate(self.randomizer.batch(self.master_seed, start, count))


class StoredReplicates:
    """Statistic values of replicates read from a :class:`ReplicateStore`."""

    def __init__(self, store: ReplicateStore, evaluator):
        self.store = store
        self.evaluator = evaluator

    def capacity(self) -> int | None:
        return self.store.n_replicates

    def values(self, start: int, count: int) -> np.ndarray:
        return self.evaluator.evaluate(self.store.rows(start, count))


class ValueReplicates:
    """Precomputed statistic values (or a callable producing them by index range)."""

    def __init__(self, values=None, fn: Callable[[int, int], np.ndarray] | None = None):
        self._values = None if values is None else np.asarray(values, dtype=np.float64)
        self._fn = fn

    def capacity(self) -> int | None:
        # short arrays are allowed; running past the end raises in values()
        return None

    def values(self, start: int, count: int) -> np.ndarray:
        if self._fn is not None:
            return np.asarray(self._fn(start, count), dtype=np.float64)
        if start + count > len(self._values):
            raise EngineError(f"only {len(self._values)} replicate values available, need {start + count}")
        return self._values[start:start + count]


class BernoulliOracle:
    """Exceedance stub: replicate ``r`` exceeds with probability ``p``.

    Values are 1.0 or 0.0 and the observed statistic is 1.0 (larger is more
    extreme), so the exceedance indicators are i.i.d. Bernoulli(p) keyed by the
    absolute replicate index.  Isolates the policy layer from any model fit.
    """

    def __init__(self, p: float, seed: int = 0):
        if not 0.0 <= p <= 1.0:
            raise ValueError("oracle probability must lie in [0, 1]")
        self.p = float(p)
        self.seed = int(seed)
        self.observed = TestStatistic(1.0, LARGER)

    def capacity(self) -> int | None:
        return None

    def values(self, start: int, count: int) -> np.ndarray:
        return (first_uniforms(self.seed, start, count) < self.p).astype(np.float64)


def _collect(source, start: int, stop: int, chunk: int, pool: ThreadPoolExecutor | None) -> np.ndarray:
    # chunk boundaries sit at absolute multiples of `chunk`, independent of workers
    bounds = []
    lo = start
    while lo < stop:
        hi = min(stop, (lo // chunk + 1) * chunk)
        bounds.append((lo, hi - lo))
        lo = hi
    if pool is None or len(bounds) == 1:
        parts = [source.values(a, n) for a, n in bounds]
    else:
        parts = list(pool.map(lambda b: source.values(*b), bounds))
    return np.concatenate(parts) if parts else np.empty(0)


# -- driver -------------------------------------------------------------------------

def run_policy(source, observed: TestStatistic, policy, alpha: float, workers: int = 1,
               chunk: int = DEFAULT_CHUNK, progress: Callable[[dict], None] | None = None,
               config: dict | None = None) -> RerandReport:
    """Consume replicate statistics from ``source`` as ``policy`` dictates."""
    t0 = time.perf_counter()
    needed = policy.max_reps(alpha)
    cap = source.capacity()
    if cap is not None and cap < needed:
        raise StoreError(f"store exhausted, need ≥ {needed:,} replicates (store holds {cap:,})")
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    trace: list[dict] = []
    try:
        if isinstance(policy, AdaptivePolicy):
            params = policy.params(alpha)
            m = 0
            L = 0
            while True:
                vals = _collect(source, L, L + params.batch, chunk, pool)
                m += int(np.count_nonzero(observed.at_least_as_extreme(vals)))
                L += params.batch
                d = adaptive_step(m, L, alpha, params)
                entry = {"L": L, "m": m, "lower": d.lower, "upper": d.upper, "status": d.status}
                trace.append(entry)
                if progress:
                    progress(entry)
                if d.terminal:
                    break
            p_value = m / L
            significant = bool(d.significant)
        else:
            L = needed
            vals = _collect(source, 0, L, chunk, pool)
            m = int(np.count_nonzero(observed.at_least_as_extreme(vals)))
            if isinstance(policy, ParametricPolicy):
                p_value = parametric_pvalue(vals, observed)
            else:
                p_value = m / L
            significant = p_value <= alpha
            entry = {"L": L, "m": m, "lower": None, "upper": None, "status": EXHAUSTED}
            trace.append(entry)
            if progress:
                progress(entry)
    finally:
        if pool is not None:
            pool.shutdown()
    elapsed = time.perf_counter() - t0
    return RerandReport(
        observed=observed.value,
        direction=observed.direction,
        L_used=L,
        m=m,
        p_hat=m / L,
        significant=bool(significant),
        p_value=float(p_value),
        policy_trace=trace,
        wall_time=elapsed,
        replicate_throughput=L / elapsed if elapsed > 0 else math.inf,
        config=config or {},
    )


def _observed(cohort: Cohort, evaluator, observed_arms) -> TestStatistic:
    arms = cohort.observed_arms() if observed_arms is None else np.asarray(observed_arms, dtype=np.uint8)
    if arms is None:
        raise CohortError("observed assignment missing: every subject needs an arm")
    if arms.shape != (cohort.n_subjects,):
        raise CohortError("observed assignment length differs from cohort size")
    return TestStatistic(float(evaluator.evaluate(arms[None, :])[0]), evaluator.direction)


def run_test(cohort: Cohort, config: RerandConfig, observed_arms=None, evaluator=None,
             progress: Callable[[dict], None] | None = None) -> RerandReport:
    """Re-randomization test with replicates generated on the fly.

    ``evaluator`` replaces the statistic (anything with ``evaluate`` and
    ``direction``); by default it is built from ``config.stat``.
    """
    config = config.resolved(cohort)
    if config.store_path:
        return run_with_store(cohort, ReplicateStore.open(config.store_path), config, observed_arms,
                              evaluator, progress)
    if evaluator is None:
        validate_for_test(cohort, config.stat)
        evaluator = make_evaluator(cohort, config.stat)
    observed = _observed(cohort, evaluator, observed_arms)
    source = GeneratedReplicates(cohort, config.minimization, config.master_seed, evaluator)
    return run_policy(source, observed, config.policy, config.alpha, config.workers, config.chunk,
                      progress, config.to_dict())


def run_with_store(cohort: Cohort, store: ReplicateStore, config: RerandConfig, observed_arms=None,
                   evaluator=None, progress: Callable[[dict], None] | None = None) -> RerandReport:
    """Like :func:`run_test` but reading replicate assignments from ``store``."""
    if config.minimization is None:
        config = replace(config, minimization=store.params)
    config = config.resolved(cohort)
    store.check_cohort(cohort, config.minimization)
    if store.n_replicates < config.policy.max_reps(config.alpha):
        raise StoreError(
            f"store exhausted, need ≥ {config.policy.max_reps(config.alpha):,} replicates "
            f"(store holds {store.n_replicates:,})"
        )
    if evaluator is None:
        validate_for_test(cohort, config.stat)
        evaluator = make_evaluator(cohort, config.stat)
    observed = _observed(cohort, evaluator, observed_arms)
    # the store replaces generation; report the seed its rows came from
    cfg = replace(config, master_seed=store.master_seed, store_path=None).to_dict()
    return run_policy(StoredReplicates(store, evaluator), observed, config.policy, config.alpha,
                      config.workers, config.chunk, progress, cfg)
