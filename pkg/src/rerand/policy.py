"""How many re-randomizations to run: fixed-precision, parametric and adaptive rules.

The adaptive rule monitors the exceedance count ``m`` after every batch of
replicates and stops once ``m`` leaves the band ``[lower(L), upper(L)]``.
The bounds solve the normal approximation to ``Binomial(L, alpha)`` for the
count at which the estimated p-value is, with probability ``rho``, more than
a relative margin ``delta`` away from ``alpha``::

    upper = ceil((sqrt(z_u**2/4 + (1+delta_u)*alpha*L) + z_u/2)**2)
    lower = floor((sqrt(z_l**2/4 + (1-delta_l)*alpha*L) - z_l/2)**2)

with ``z = Phi^-1(rho)``.
"""

from __future__ import annotations

import csv
import io
import math
from decimal import ROUND_HALF_UP, Decimal
from dataclasses import dataclass, replace

import numpy as np

from .stats import LARGER, TestStatistic, normal_cdf, normal_quantile

__all__ = [
    "PR_Z",
    "AdaptiveParams",
    "AdaptiveBounds",
    "PolicyDecision",
    "CONTINUE",
    "STOP_LOW",
    "STOP_HIGH",
    "EXHAUSTED",
    "pr_repetitions",
    "adaptive_bounds",
    "rule_table",
    "rule_table_csv",
    "adaptive_step",
    "parametric_pvalue",
    "estimate_pvalue",
]

# two-sided 99% normal quantile as conventionally rounded; reproduces
# 65,695 repetitions at alpha = 0.01
PR_Z = 2.576
PR_RELATIVE_ERROR = 0.1

CONTINUE = "continue"
STOP_LOW = "stop_low"
STOP_HIGH = "stop_high"
EXHAUSTED = "exhausted"
TERMINAL = (STOP_LOW, STOP_HIGH, EXHAUSTED)


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return alpha


def pr_repetitions(alpha: float, full_precision: bool = False) -> int:
    """Repetitions giving 10% relative error with 99% probability at p = alpha."""
    alpha = _check_alpha(alpha)
    z = float(normal_quantile(0.995)) if full_precision else PR_Z
    return math.ceil((z / PR_RELATIVE_ERROR) ** 2 * (1.0 - alpha) / alpha)


@dataclass(frozen=True)
class AdaptiveParams:
    alpha: float
    delta_u: float = 0.1
    delta_l: float = 0.1
    rho_u: float = 0.99
    rho_l: float = 0.99
    batch: int = 1000
    l_max: int | str = "auto"

    def __post_init__(self):
        _check_alpha(self.alpha)
        if not (self.delta_u > 0 and self.delta_l > 0):
            raise ValueError("delta_u and delta_l must be positive")
        if (1.0 - self.delta_l) * self.alpha <= 0:
            raise ValueError("(1 - delta_l) * alpha must be positive")
        for name in ("rho_u", "rho_l"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if int(self.batch) != self.batch or self.batch < 1:
            raise ValueError("batch must be a positive integer")
        if self.l_max != "auto" and (int(self.l_max) != self.l_max or self.l_max < 1):
            raise ValueError("l_max must be a positive integer or 'auto'")

    @property
    def max_reps(self) -> int:
        """Resolved upper limit: the PR count rounded up to a multiple of ``batch``."""
        if self.l_max == "auto":
            return self.batch * math.ceil(pr_repetitions(self.alpha) / self.batch)
        return int(self.l_max)

    def resolved(self) -> "AdaptiveParams":
        return replace(self, l_max=self.max_reps)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "delta_u": self.delta_u,
            "delta_l": self.delta_l,
            "rho_u": self.rho_u,
            "rho_l": self.rho_l,
            "batch": self.batch,
            "l_max": self.max_reps,
        }


@dataclass(frozen=True)
class AdaptiveBounds:
    L: int
    lower: int
    upper: int

    @property
    def p_lower(self) -> float:
        return self.lower / self.L

    @property
    def p_upper(self) -> float:
        return self.upper / self.L


@dataclass(frozen=True)
class PolicyDecision:
    status: str
    m: int
    L: int
    lower: int | None = None
    upper: int | None = None
    significant: bool | None = None

    @property
    def p_hat(self) -> float:
        return self.m / self.L

    @property
    def terminal(self) -> bool:
        return self.status in TERMINAL


def adaptive_bounds(alpha: float, L: int, params: AdaptiveParams) -> AdaptiveBounds:
    if L < 1:
        raise ValueError("L must be at least 1")
    z_u = float(normal_quantile(params.rho_u))
    z_l = float(normal_quantile(params.rho_l))
    upper = math.ceil((math.sqrt(z_u * z_u / 4 + (1 + params.delta_u) * alpha * L) + z_u / 2) ** 2)
    lower = math.floor((math.sqrt(z_l * z_l / 4 + (1 - params.delta_l) * alpha * L) - z_l / 2) ** 2)
    return AdaptiveBounds(int(L), int(lower), int(upper))


def rule_table(alpha: float, params: AdaptiveParams, rows=None) -> list[AdaptiveBounds]:
    """Bounds at ``L = batch, 2*batch, ..., l_max`` (or at the given ``rows``)."""
    alpha = _check_alpha(alpha)
    if rows is None:
        rows = range(params.batch, params.max_reps + 1, params.batch)
    return [adaptive_bounds(alpha, int(L), params) for L in rows]


def _ratio6(num: int, den: int) -> str:
    # exact decimal ratio, half-up: 318/4000000 prints 0.000080, not 0.000079
    return str((Decimal(num) / Decimal(den)).quantize(Decimal("0.000001"), rounding=ROUND_HALF_UP))


def rule_table_csv(table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["L", "l", "u", "p_l", "p_u"])
    for b in table:
        w.writerow([b.L, b.lower, b.upper, _ratio6(b.lower, b.L), _ratio6(b.upper, b.L)])
    return buf.getvalue()


def adaptive_step(m: int, L: int, alpha: float, params: AdaptiveParams) -> PolicyDecision:
    """Decision after ``L`` replicates with ``m`` exceedances."""
    if not 0 <= m <= L:
        raise ValueError(f"need 0 <= m <= L, got m={m}, L={L}")
    b = adaptive_bounds(alpha, L, params)
    if m < b.lower:
        status = STOP_LOW
    elif m > b.upper:
        status = STOP_HIGH
    elif L >= params.max_reps:
        status = EXHAUSTED
    else:
        status = CONTINUE
    significant = (m / L <= alpha) if status in TERMINAL else None
    return PolicyDecision(status, int(m), int(L), b.lower, b.upper, significant)


def estimate_pvalue(m: int, L: int) -> float:
    if L < 1 or not 0 <= m <= L:
        raise ValueError(f"need L >= 1 and 0 <= m <= L, got m={m}, L={L}")
    return m / L


def parametric_pvalue(sample, observed: TestStatistic) -> float:
    """Tail probability of ``observed`` under a normal fitted to the null sample."""
    values = np.asarray(sample, dtype=np.float64)
    if values.size < 30:
        raise ValueError(f"parametric p-value needs at least 30 null replicates, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise ValueError("null sample contains non-finite values")
    mu = float(values.mean())
    sd = float(values.std(ddof=1))
    if not sd > 0:
        raise ValueError("degenerate null sample: standard deviation is zero")
    z = (observed.value - mu) / sd
    return float(normal_cdf(-z) if observed.direction == LARGER else normal_cdf(z))
