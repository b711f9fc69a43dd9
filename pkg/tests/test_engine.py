import json
import os

import numpy as np
import pytest
from conftest import make_cohort

from rerand.cohort import Cohort, CohortError, Outcome, Subject
from rerand.engine import (
    REPORT_SCHEMA_VERSION,
    AdaptivePolicy,
    BernoulliOracle,
    FixedPolicy,
    ParametricPolicy,
    PRPolicy,
    RerandConfig,
    ValueReplicates,
    parse_policy,
    resolve_workers,
    run_policy,
    run_test,
    run_with_store,
)
from rerand.minimization import MinimizationParams, randomize_cohort
from rerand.policy import EXHAUSTED, STOP_HIGH, STOP_LOW
from rerand.stats import LARGER, StatKind, TestStatistic
from rerand.store import HEADER_SIZE, MAGIC, ReplicateStore, StoreError, pregenerate

LOGRANK = StatKind("stratified_logrank")


def _cfg(policy, alpha=0.01, seed=3, workers=1, **kw):
    return RerandConfig(LOGRANK, policy, alpha, master_seed=seed, workers=workers, **kw)


def test_parse_policy():
    assert parse_policy("fixed:1000") == FixedPolicy(1000)
    assert parse_policy("pr") == PRPolicy()
    assert parse_policy("parametric:5000") == ParametricPolicy(5000)
    assert parse_policy("adaptive", batch=500) == AdaptivePolicy(batch=500)
    for bad in ("fixed:0", "fixed", "pr:3", "bogus", "parametric:10"):
        with pytest.raises(ValueError):
            parse_policy(bad)


def test_resolve_workers(monkeypatch):
    monkeypatch.setenv("RERAND_WORKERS", "3")
    assert resolve_workers(None) == 3
    assert resolve_workers(2) == 2
    assert resolve_workers("auto") == (os.cpu_count() or 1)
    with pytest.raises(ValueError):
        resolve_workers(0)


class _Constant:
    direction = LARGER

    def evaluate(self, assignments):
        return np.full(len(assignments), 2.5)


def test_degenerate_statistic_ties_count(survival_cohort):
    # statistic identical for every assignment: each replicate ties the observed value
    r = run_test(survival_cohort, _cfg(FixedPolicy(1000)), evaluator=_Constant())
    assert r.m == 1000 and r.p_hat == 1.0 and r.L_used == 1000


@pytest.mark.parametrize("seed", [1, 7, 2**63 + 5])
def test_worker_count_invariance(survival_cohort, seed):
    reports = [run_test(survival_cohort, _cfg(AdaptivePolicy(), seed=seed, workers=w)) for w in (1, 2, 8)]
    keys = {(r.m, r.L_used, r.significant, r.p_hat) for r in reports}
    assert len(keys) == 1
    assert reports[0].policy_trace == reports[2].policy_trace


def test_fixed_policy_worker_and_chunk_invariance(survival_cohort):
    base = run_test(survival_cohort, _cfg(FixedPolicy(2500), chunk=500))
    for w, chunk in ((2, 300), (8, 1000), (3, 7)):
        r = run_test(survival_cohort, _cfg(FixedPolicy(2500), workers=w, chunk=chunk))
        assert (r.m, r.L_used, r.significant) == (base.m, base.L_used, base.significant)


def test_replicates_follow_streams(survival_cohort):
    # m recomputed by hand from individually drawn replicates
    from rerand.stats import evaluate_single

    params = MinimizationParams.for_cohort(survival_cohort)
    obs = evaluate_single(survival_cohort, survival_cohort.observed_arms(), LOGRANK)
    m = sum(bool(obs.at_least_as_extreme(evaluate_single(survival_cohort, randomize_cohort(
        survival_cohort, params, (11, r)), LOGRANK).value)) for r in range(200))
    assert run_test(survival_cohort, _cfg(FixedPolicy(200), seed=11)).m == m


def test_report_fields_and_json(survival_cohort):
    r = run_test(survival_cohort, _cfg(AdaptivePolicy()))
    d = json.loads(r.to_json())
    assert d["schema_version"] == REPORT_SCHEMA_VERSION
    assert d["p_hat"] == d["m"] / d["L_used"]
    assert d["policy_trace"][-1]["status"] in (STOP_LOW, STOP_HIGH, EXHAUSTED)
    assert all(e["status"] == "continue" for e in d["policy_trace"][:-1])
    assert d["config"]["policy"]["l_max"] == 66_000
    assert d["config"]["minimization"]["p_best"] == 0.9
    assert d["replicate_throughput"] > 0
    assert "wall_time" not in r.to_dict(timing=False)


def test_pr_policy_uses_65695(survival_cohort):
    r = run_test(survival_cohort, _cfg(PRPolicy()))
    assert r.L_used == 65_695 and r.policy_trace[-1]["status"] == EXHAUSTED


def test_parametric_reports_normal_p_value(survival_cohort):
    r = run_test(survival_cohort, _cfg(ParametricPolicy(1000)))
    assert r.L_used == 1000
    assert r.p_hat == r.m / 1000
    assert 0 < r.p_value < 1
    assert r.significant == (r.p_value <= 0.01)


def test_missing_observed_assignment():
    c = make_cohort(30, "survival", seed=0, with_arms=False)
    with pytest.raises(CohortError, match="observed assignment"):
        run_test(c, _cfg(FixedPolicy(10)))
    r = run_test(c, _cfg(FixedPolicy(10)), observed_arms=[i % 2 for i in range(30)])
    assert r.L_used == 10


def test_missing_responses_rejected():
    c = make_cohort(30, None, seed=0)
    with pytest.raises(CohortError, match="survival outcome required"):
        run_test(c, _cfg(FixedPolicy(10)))


# -- Bernoulli oracle -----------------------------------------------------------

def test_oracle_stops_high_at_first_batch():
    oracle = BernoulliOracle(0.1, seed=4)
    r = run_policy(oracle, oracle.observed, AdaptivePolicy(), 0.0001)
    assert r.L_used == 1000
    assert r.policy_trace[-1]["status"] == STOP_HIGH
    assert not r.significant


def test_oracle_fixed_policy_is_binomial():
    L, p, runs = 400, 0.3, 500
    ms = []
    for i in range(runs):
        oracle = BernoulliOracle(p, seed=1000 + i)
        ms.append(run_policy(oracle, oracle.observed, FixedPolicy(L), 0.05).m)
    ms = np.asarray(ms, dtype=float)
    mean, var = L * p, L * p * (1 - p)
    assert abs(ms.mean() - mean) < 4 * np.sqrt(var / runs)
    # sample variance: se of s^2 for a near-normal count is about var * sqrt(2 / (runs - 1))
    assert abs(ms.var(ddof=1) - var) < 4 * var * np.sqrt(2 / (runs - 1))


def test_exceedance_count_exchangeable_within_batch():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=3000)
    obs = TestStatistic(1.2, LARGER)
    base = run_policy(ValueReplicates(vals), obs, AdaptivePolicy(l_max=3000), 0.05)
    shuffled = vals.copy()
    for b in range(3):
        rng.shuffle(shuffled[1000 * b:1000 * (b + 1)])
    again = run_policy(ValueReplicates(shuffled), obs, AdaptivePolicy(l_max=3000), 0.05)
    assert base.policy_trace == again.policy_trace


def test_adaptive_decides_only_at_batch_boundaries():
    # upper bound crossed within the first batch still evaluates all 1,000
    vals = np.r_[np.ones(50), np.zeros(950)]
    r = run_policy(ValueReplicates(vals), TestStatistic(1.0, LARGER), AdaptivePolicy(), 0.0001)
    assert r.L_used == 1000 and r.m == 50


# -- replicate store ----------------------------------------------------------------

def test_store_row_reproducible(tmp_path, survival_cohort):
    params = MinimizationParams.for_cohort(survival_cohort)
    store = pregenerate(survival_cohort, params, 1000, 42, tmp_path / "s.rrst")
    np.testing.assert_array_equal(store.row(137), randomize_cohort(survival_cohort, params, (42, 137)))
    raw = (tmp_path / "s.rrst").read_bytes()
    assert raw[:4] == MAGIC
    assert len(raw) == HEADER_SIZE + 1000 * survival_cohort.n_subjects
    meta = json.loads((tmp_path / "s.rrst.json").read_text())
    assert meta["master_seed"] == 42 and meta["n_replicates"] == 1000


def test_store_header_layout(tmp_path, survival_cohort):
    import struct

    pregenerate(survival_cohort, MinimizationParams.for_cohort(survival_cohort), 10, 1, tmp_path / "s")
    raw = (tmp_path / "s").read_bytes()[:HEADER_SIZE]
    magic, version, n_rep, n_sub, n_arms = struct.unpack_from("<4sHQIB", raw)
    assert (magic, version, n_rep, n_sub, n_arms) == (b"RRST", 1, 10, 200, 2)
    assert raw[19:] == bytes(HEADER_SIZE - 19)


def test_store_different_seeds_differ(tmp_path, survival_cohort):
    params = MinimizationParams.for_cohort(survival_cohort)
    a = pregenerate(survival_cohort, params, 500, 1, tmp_path / "a").assignments
    b = pregenerate(survival_cohort, params, 500, 2, tmp_path / "b").assignments
    hamming = (np.asarray(a) != np.asarray(b)).sum(axis=1)
    assert np.mean(hamming > 0) >= 0.99


def test_run_with_store_equals_run_test(tmp_path, survival_cohort):
    params = MinimizationParams.for_cohort(survival_cohort)
    store = pregenerate(survival_cohort, params, 66_000, 9, tmp_path / "s")
    for policy in (AdaptivePolicy(), FixedPolicy(3000), ParametricPolicy(1000)):
        cfg = _cfg(policy, seed=9)
        a = run_test(survival_cohort, cfg).to_dict(timing=False)
        b = run_with_store(survival_cohort, store, cfg).to_dict(timing=False)
        assert a == b
    via_path = run_test(survival_cohort, _cfg(AdaptivePolicy(), seed=9, store_path=str(tmp_path / "s")))
    assert via_path.to_dict(timing=False) == run_test(survival_cohort, _cfg(AdaptivePolicy(), seed=9)).to_dict(timing=False)


def test_store_reused_across_endpoints(tmp_path, survival_cohort):
    params = MinimizationParams.for_cohort(survival_cohort)
    store = pregenerate(survival_cohort, params, 5000, 9, tmp_path / "s")
    rng = np.random.default_rng(0)
    os_cohort = survival_cohort.with_responses(
        [Outcome("survival", float(t), bool(e)) for t, e in zip(rng.exponential(size=200) + 0.01, rng.random(200) < 0.5)])
    pfs = run_with_store(survival_cohort, store, _cfg(FixedPolicy(5000), seed=9))
    os_ = run_with_store(os_cohort, store, _cfg(FixedPolicy(5000), seed=9))
    assert pfs.L_used == os_.L_used == 5000


def test_store_fingerprint_mismatch(tmp_path, survival_cohort):
    params = MinimizationParams.for_cohort(survival_cohort)
    store = pregenerate(survival_cohort, params, 1000, 9, tmp_path / "s")
    s0 = survival_cohort.subjects[5]
    edited = Cohort(survival_cohort.factors, survival_cohort.subjects[:5] + (
        Subject(s0.id, (1 - s0.factor_levels[0], s0.factor_levels[1]), s0.response, s0.arm),) + survival_cohort.subjects[6:])
    with pytest.raises(StoreError, match="cohort changed since store generation"):
        run_with_store(edited, store, _cfg(FixedPolicy(100), seed=9))


def test_store_exhausted_reports_need(tmp_path, survival_cohort):
    params = MinimizationParams.for_cohort(survival_cohort)
    store = pregenerate(survival_cohort, params, 5000, 9, tmp_path / "s")
    with pytest.raises(StoreError, match="store exhausted, need ≥ 66,000"):
        run_with_store(survival_cohort, store, _cfg(AdaptivePolicy(), seed=9))


def test_store_rejects_bad_files(tmp_path, survival_cohort):
    params = MinimizationParams.for_cohort(survival_cohort)
    pregenerate(survival_cohort, params, 10, 9, tmp_path / "s")
    data = bytearray((tmp_path / "s").read_bytes())
    (tmp_path / "t").write_bytes(data[:-1])
    (tmp_path / "t.json").write_text((tmp_path / "s.json").read_text())
    with pytest.raises(StoreError, match="size"):
        ReplicateStore.open(tmp_path / "t")
    data[:4] = b"XXXX"
    (tmp_path / "t").write_bytes(data)
    with pytest.raises(StoreError, match="magic"):
        ReplicateStore.open(tmp_path / "t")
    with pytest.raises(ValueError):
        pregenerate(survival_cohort, params, 0, 9, tmp_path / "u")


@pytest.mark.skipif((os.cpu_count() or 1) < 4, reason="throughput scaling needs at least 4 CPUs")
def test_throughput_scales_with_workers(survival_cohort):
    import time

    def rate(w):
        t0 = time.perf_counter()
        run_test(survival_cohort, _cfg(FixedPolicy(40_000), workers=w, chunk=2000))
        return 40_000 / (time.perf_counter() - t0)

    rate(1)
    assert rate(4) >= 0.7 * 4 * rate(1)
