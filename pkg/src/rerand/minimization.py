"""Pocock-Simon minimization with ratio-adjusted range imbalance.

Each incoming subject is tentatively placed in every arm; for each factor the
counts at the subject's own level are divided by the arm ratio and scored by
their range, and the weighted sum over factors is the arm's score.  Minimizing
arms share ``p_best``; the rest share the remainder.  The first subject is
drawn from the allocation ratio.

Two implementations live here.  :func:`assign_next` works one subject at a
time on a :class:`MinimizationState` and is the readable reference;
:func:`randomize_batch` runs whole replicates in a compiled loop, and the two
produce identical assignments for the same random stream.  Each subject
consumes exactly one uniform from its replicate's stream.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numba as nb
import numpy as np

from .cohort import Cohort, Subject
from .rng import MASK64, fill_uniforms, replicate_stream

__all__ = [
    "ImbalanceKind",
    "MinimizationParams",
    "MinimizationState",
    "imbalance_range",
    "arm_probabilities",
    "assign_next",
    "randomize_cohort",
    "randomize_batch",
    "randomize_reference",
    "BatchRandomizer",
]

# scores closer than this fraction of the total weight count as tied
_TIE_RTOL = 1e-10


class ImbalanceKind(str, enum.Enum):
    RANGE = "range"


@dataclass(frozen=True)
class MinimizationParams:
    weights: tuple[float, ...]
    ratio: tuple[int, ...] = (1, 1)
    p_best: float = 0.9
    imbalance: ImbalanceKind = ImbalanceKind.RANGE

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "ratio", tuple(int(r) for r in self.ratio))
        object.__setattr__(self, "imbalance", ImbalanceKind(self.imbalance))
        n_arms = len(self.ratio)
        if n_arms < 2 or min(self.ratio) < 1:
            raise ValueError("ratio needs a positive integer for each of at least 2 arms")
        if not (1.0 / n_arms < self.p_best <= 1.0):
            raise ValueError(f"p_best must lie in (1/{n_arms}, 1], got {self.p_best}")
        if not self.weights or min(self.weights) < 0 or sum(self.weights) <= 0:
            raise ValueError("weights must be nonnegative and not all zero")

    @property
    def n_arms(self) -> int:
        return len(self.ratio)

    @classmethod
    def for_cohort(cls, cohort: Cohort, p_best: float = 0.9) -> "MinimizationParams":
        return cls(tuple(f.weight for f in cohort.factors), cohort.arm_ratio, p_best)

    def to_dict(self) -> dict:
        return {
            "weights": list(self.weights),
            "ratio": list(self.ratio),
            "p_best": self.p_best,
            "imbalance": self.imbalance.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MinimizationParams":
        return cls(tuple(d["weights"]), tuple(d["ratio"]), float(d["p_best"]), d.get("imbalance", "range"))


class MinimizationState:
    """Per-(factor, level, arm) counts of subjects assigned so far."""

    def __init__(self, levels_per_factor, n_arms: int):
        self.levels_per_factor = tuple(int(k) for k in levels_per_factor)
        self.n_arms = n_arms
        self.counts = np.zeros((len(self.levels_per_factor), max(self.levels_per_factor), n_arms), dtype=np.int64)
        self.n_assigned = 0

    @classmethod
    def for_cohort(cls, cohort: Cohort) -> "MinimizationState":
        return cls([f.n_levels for f in cohort.factors], cohort.n_arms)

    @classmethod
    def from_assignments(cls, levels: np.ndarray, arms, levels_per_factor, n_arms: int) -> "MinimizationState":
        state = cls(levels_per_factor, n_arms)
        for row, arm in zip(np.asarray(levels), arms):
            state.add(row, int(arm))
        return state

    def add(self, factor_levels, arm: int) -> None:
        for f, lv in enumerate(factor_levels):
            self.counts[f, lv, arm] += 1
        self.n_assigned += 1


def imbalance_range(values) -> float:
    """Range (max minus min) of ratio-adjusted per-arm counts."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.max() - v.min())


def _scores(state: MinimizationState, factor_levels, params: MinimizationParams) -> np.ndarray:
    inv_ratio = 1.0 / np.asarray(params.ratio, dtype=np.float64)
    scores = np.zeros(params.n_arms)
    for k in range(params.n_arms):
        for f, lv in enumerate(factor_levels):
            hypo = state.counts[f, lv].astype(np.float64)
            hypo[k] += 1
            scores[k] += params.weights[f] * imbalance_range(hypo * inv_ratio)
    return scores


def arm_probabilities(state: MinimizationState, factor_levels, params: MinimizationParams) -> np.ndarray:
    """Assignment distribution for the next subject given ``state``."""
    n_arms = params.n_arms
    if state.n_assigned == 0:
        r = np.asarray(params.ratio, dtype=np.float64)
        return r / r.sum()
    scores = _scores(state, factor_levels, params)
    tol = _TIE_RTOL * sum(params.weights)
    best = scores <= scores.min() + tol
    n_best = int(best.sum())
    if n_best == n_arms:
        return np.full(n_arms, 1.0 / n_arms)
    probs = np.where(best, params.p_best / n_best, (1.0 - params.p_best) / (n_arms - n_best))
    return probs / probs.sum()


def _draw(probs: np.ndarray, u: float) -> int:
    acc = 0.0
    for k in range(len(probs) - 1):
        acc += probs[k]
        if u < acc:
            return k
    return len(probs) - 1


def assign_next(state: MinimizationState, subject, params: MinimizationParams, rng) -> int:
    """Draw the next subject's arm from ``rng`` (one uniform) and update ``state``."""
    levels = subject.factor_levels if isinstance(subject, Subject) else tuple(subject)
    arm = _draw(arm_probabilities(state, levels, params), float(rng.random()))
    state.add(levels, arm)
    return arm


def randomize_reference(cohort: Cohort, params: MinimizationParams, master_seed: int, replicate: int = 0) -> np.ndarray:
    """Pure-Python replicate, subject by subject.  Slow; used to check the kernel."""
    rng = replicate_stream(master_seed, replicate)
    state = MinimizationState.for_cohort(cohort)
    return np.array([assign_next(state, s, params, rng) for s in cohort.subjects], dtype=np.uint8)


@nb.njit(nogil=True, cache=True)
def _minimize_batch(rows, weights, inv_ratio, first_cdf, p_best, tol, n_rows, seed, start, out):
    # rows[i, f]: flattened (factor, level) slot of subject i in the count table
    n, n_factors = rows.shape
    n_arms = inv_ratio.shape[0]
    counts = np.zeros((n_rows, n_arms), dtype=np.float64)
    u = np.empty(n, dtype=np.float64)
    scores = np.empty(n_arms, dtype=np.float64)
    base = np.empty(n_arms, dtype=np.float64)
    probs = np.empty(n_arms, dtype=np.float64)
    for r in range(out.shape[0]):
        counts[:] = 0.0
        fill_uniforms(seed, np.uint64(start + r), u)
        arm = n_arms - 1
        for k in range(n_arms - 1):
            if u[0] < first_cdf[k]:
                arm = k
                break
        out[r, 0] = arm
        for f in range(n_factors):
            counts[rows[0, f], arm] += 1.0
        for i in range(1, n):
            for k in range(n_arms):
                scores[k] = 0.0
            for f in range(n_factors):
                row = rows[i, f]
                w = weights[f]
                for a in range(n_arms):
                    base[a] = counts[row, a] * inv_ratio[a]
                for k in range(n_arms):
                    bumped = (counts[row, k] + 1.0) * inv_ratio[k]
                    hi = bumped
                    lo = bumped
                    for a in range(n_arms):
                        if a != k:
                            if base[a] > hi:
                                hi = base[a]
                            if base[a] < lo:
                                lo = base[a]
                    scores[k] += w * (hi - lo)
            best = scores[0]
            for k in range(1, n_arms):
                if scores[k] < best:
                    best = scores[k]
            n_best = 0
            for k in range(n_arms):
                if scores[k] <= best + tol:
                    n_best += 1
            if n_best == n_arms:
                for k in range(n_arms):
                    probs[k] = 1.0
            else:
                q_best = p_best / n_best
                q_rest = (1.0 - p_best) / (n_arms - n_best)
                for k in range(n_arms):
                    probs[k] = q_best if scores[k] <= best + tol else q_rest
            total = 0.0
            for k in range(n_arms):
                total += probs[k]
            arm = n_arms - 1
            acc = 0.0
            for k in range(n_arms - 1):
                acc += probs[k] / total
                if u[i] < acc:
                    arm = k
                    break
            out[r, i] = arm
            for f in range(n_factors):
                counts[rows[i, f], arm] += 1.0


@nb.njit(nogil=True, cache=True)
def _minimize_batch_two_arm(rows, weights, inv_ratio, first_cdf, p_best, tol, n_rows, seed, start, out):
    # same arithmetic as _minimize_batch specialised to two arms; outputs are identical
    n, n_factors = rows.shape
    counts = np.zeros((n_rows, 2), dtype=np.float64)
    u = np.empty(n, dtype=np.float64)
    inv0 = inv_ratio[0]
    inv1 = inv_ratio[1]
    rest = 1.0 - p_best
    total = p_best + rest
    q_low = p_best / total
    q_high = rest / total
    for r in range(out.shape[0]):
        counts[:] = 0.0
        fill_uniforms(seed, np.uint64(start + r), u)
        arm = 0 if u[0] < first_cdf[0] else 1
        out[r, 0] = arm
        for f in range(n_factors):
            counts[rows[0, f], arm] += 1.0
        for i in range(1, n):
            s0 = 0.0
            s1 = 0.0
            for f in range(n_factors):
                row = rows[i, f]
                n0 = counts[row, 0]
                n1 = counts[row, 1]
                s0 += weights[f] * abs((n0 + 1.0) * inv0 - n1 * inv1)
                s1 += weights[f] * abs((n1 + 1.0) * inv1 - n0 * inv0)
            if s0 < s1:
                q0 = 0.5 if s1 <= s0 + tol else q_low
            else:
                q0 = 0.5 if s0 <= s1 + tol else q_high
            arm = 0 if u[i] < q0 else 1
            out[r, i] = arm
            for f in range(n_factors):
                counts[rows[i, f], arm] += 1.0


def _kernel_args(cohort_or_levels, params: MinimizationParams, levels_per_factor=None):
    if isinstance(cohort_or_levels, Cohort):
        levels = np.ascontiguousarray(cohort_or_levels.levels_matrix())
        levels_per_factor = [f.n_levels for f in cohort_or_levels.factors]
    else:
        levels = np.ascontiguousarray(cohort_or_levels, dtype=np.int64)
        if levels_per_factor is None:
            levels_per_factor = list(levels.max(axis=0) + 1) if levels.size else [1]
    if levels.shape[1] != len(params.weights):
        raise ValueError("need one weight per factor")
    offsets = np.concatenate([[0], np.cumsum(levels_per_factor)[:-1]]).astype(np.int64)
    rows = np.ascontiguousarray(levels + offsets[None, :])
    ratio = np.asarray(params.ratio, dtype=np.float64)
    first_cdf = np.cumsum(ratio / ratio.sum())
    return (
        rows,
        np.asarray(params.weights, dtype=np.float64),
        1.0 / ratio,
        first_cdf,
        float(params.p_best),
        _TIE_RTOL * sum(params.weights),
        int(sum(levels_per_factor)),
    )


class BatchRandomizer:
    """Kernel inputs prepared once for a cohort; ``batch`` draws replicate rows."""

    def __init__(self, cohort, params: MinimizationParams, levels_per_factor=None, generic: bool = False):
        self.params = params
        self._args = _kernel_args(cohort, params, levels_per_factor)
        self.n_subjects = self._args[0].shape[0]
        two_arm = params.n_arms == 2 and not generic
        self._kernel = _minimize_batch_two_arm if two_arm else _minimize_batch

    def batch(self, master_seed: int, start: int, count: int) -> np.ndarray:
        out = np.empty((count, self.n_subjects), dtype=np.uint8)
        if count and self.n_subjects:
            self._kernel(*self._args, np.uint64(int(master_seed) & MASK64), np.uint64(start), out)
        return out


def randomize_batch(cohort, params: MinimizationParams, master_seed: int, start: int, count: int,
                    levels_per_factor=None, generic: bool = False) -> np.ndarray:
    """Replicates ``start .. start+count-1`` as a (count, n_subjects) uint8 matrix.

    ``cohort`` may be a :class:`Cohort` or a raw (n, n_factors) level matrix.
    Two-arm designs use a specialised kernel unless ``generic`` is set.
    """
    return BatchRandomizer(cohort, params, levels_per_factor, generic).batch(master_seed, start, count)


def randomize_cohort(cohort, params: MinimizationParams, seed) -> np.ndarray:
    """One replicate.  ``seed`` is either an int or a ``(master_seed, replicate)`` pair."""
    master, rep = (seed, 0) if np.isscalar(seed) else seed
    return randomize_batch(cohort, params, master, rep, 1)[0]
