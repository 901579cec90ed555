"""Guaranteed-coverage confidence intervals for the variance of returns.

The interval combines a confidence interval on the second moment E[rho G^2]
with one on the squared mean E[rho G]^2. Each one-sided bound comes from a
truncated empirical-Bernstein inequality applied to control-variate shifted
samples, so that the long tail of the importance weights is always the one
being truncated.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import (Dataset, InsufficientData, InvalidInput, ReturnSpec, TabularPolicy,
                   Trajectory, UnpaddedTrajectory, as_generator)
from .estimators import coupled_terms

C_FLOOR = 1e-9
MIN_SELECTION_SAMPLES = 40
PRE_FRACTION = 1.0 / 20.0
QUANTILE_GRID = tuple(q / 10 for q in range(1, 11))


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float
    delta: float
    degenerate: bool = False

    def __post_init__(self):
        if self.lower > self.upper:
            raise InvalidInput(f"interval lower {self.lower} exceeds upper {self.upper}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, x: float) -> bool:
        return self.lower <= x <= self.upper


@dataclass(frozen=True)
class DeltaBudget:
    """Failure probabilities of the four sub-bounds.

    d1: lower bound on E[rho G^2]; d2: upper bound on E[rho G]^2;
    d3: upper bound on E[rho G^2]; d4: lower bound on E[rho G]^2.
    The two bounds on E[rho G] behind d2 (and d4) get half of it each.
    """

    d1: float
    d2: float
    d3: float
    d4: float

    def __post_init__(self):
        if min(self.d1, self.d2, self.d3, self.d4) <= 0:
            raise InvalidInput("every delta in the budget must be positive")

    @property
    def total(self) -> float:
        return self.d1 + self.d2 + self.d3 + self.d4

    @classmethod
    def even(cls, delta: float) -> "DeltaBudget":
        return cls(delta / 4, delta / 4, delta / 4, delta / 4)

    @classmethod
    def one_sided(cls, delta: float) -> "DeltaBudget":
        """Each one-sided bound spends the full delta (half on each term)."""
        return cls(delta / 2, delta / 2, delta / 2, delta / 2)


@dataclass(frozen=True)
class TruncationPlan:
    c: float
    grid: tuple[float, ...]
    pre_idx: np.ndarray
    post_idx: np.ndarray
    fallback: bool = False

    @property
    def n_pre(self) -> int:
        return self.pre_idx.size

    @property
    def n_post(self) -> int:
        return self.post_idx.size


# ---------------------------------------------------------------------------
# truncated concentration bound


def _check_ci_args(x: np.ndarray, delta: float) -> None:
    if x.size < 2:
        raise InvalidInput(f"need at least 2 samples, got {x.size}")
    if not (0.0 < delta <= 0.5):
        raise InvalidInput(f"delta must lie in (0, 0.5], got {delta}")


def _truncated_lower(y: np.ndarray, c: float, delta: float, n: int) -> float:
    """Lower bound from samples already truncated at c > 0, for sample count n.

    The pairwise sum over (i, j) of (u_i - u_j)^2 equals 2 m sum((u - mean u)^2)
    on the m available samples; the centred form avoids the cancellation of
    2 m sum(u^2) - 2 (sum u)^2. It is then rescaled to n.
    """
    m = y.size
    u = y / c
    dev = u - np.mean(u)
    pair = 2.0 * m * np.dot(dev, dev) * (n / m) ** 2
    log_term = math.log(2.0 / delta)
    return float(np.mean(y)
                 - c * 7.0 * log_term / (3.0 * (n - 1))
                 - (c / n) * math.sqrt(log_term / (n - 1) * pair))


def ci_lower_truncated(samples, c: float, delta: float) -> float:
    """High-confidence lower bound on the mean of nonnegative samples.

    Samples are truncated at the common threshold ``c`` before the bound is
    evaluated; truncation can only lower the mean, so the bound stays valid.
    """
    x = np.asarray(samples, dtype=float)
    _check_ci_args(x, delta)
    if np.any(x < 0):
        raise InvalidInput("lower bound needs nonnegative samples")
    if not c > 0:
        raise InvalidInput(f"threshold must be positive, got {c}")
    return _truncated_lower(np.minimum(x, c), c, delta, x.size)


def ci_upper_truncated(samples, c: float, delta: float) -> float:
    """High-confidence upper bound on the mean of nonpositive samples (mirror image)."""
    x = np.asarray(samples, dtype=float)
    _check_ci_args(x, delta)
    if np.any(x > 0):
        raise InvalidInput("upper bound needs nonpositive samples")
    if not c < 0:
        raise InvalidInput(f"threshold must be negative, got {c}")
    return -_truncated_lower(np.minimum(-x, -c), -c, delta, x.size)


# ---------------------------------------------------------------------------
# threshold selection


def partition(n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle and split indices 1/20 : 19/20 into (pre, post)."""
    perm = as_generator(rng).permutation(n)
    k = math.ceil(n * PRE_FRACTION)
    return perm[:k], perm[k:]


def _grid(pre_abs: np.ndarray) -> tuple[float, ...]:
    nz = pre_abs[pre_abs > 0]
    cands = {C_FLOOR}
    if nz.size:
        cands.update(float(max(q, C_FLOOR)) for q in np.quantile(nz, QUANTILE_GRID))
    return tuple(sorted(cands))


def select_threshold(samples, delta: float, direction: str, rng=None, *,
                     split: tuple[np.ndarray, np.ndarray] | None = None,
                     strict: bool = False) -> TruncationPlan:
    """Pick the truncation threshold using only a small held-out slice of the data.

    The candidate c values are quantiles of |sample| on the pre slice. Each is
    scored by the bound it would give on the post slice, predicted from the pre
    slice statistics. Ties resolve to the smallest |c|.
    Below ``MIN_SELECTION_SAMPLES`` samples the plan falls back to c = max|sample|
    over all samples (flagged), or raises InsufficientData when ``strict``.
    """
    x = np.asarray(samples, dtype=float)
    if direction not in ("lower", "upper"):
        raise InvalidInput(f"direction must be 'lower' or 'upper', got {direction!r}")
    sign = 1.0 if direction == "lower" else -1.0
    n = x.size
    if n < MIN_SELECTION_SAMPLES:
        if strict:
            raise InsufficientData(f"threshold selection needs {MIN_SELECTION_SAMPLES} samples, got {n}")
        warnings.warn(f"only {n} samples; truncation threshold falls back to max |sample|", stacklevel=2)
        c = max(float(np.max(np.abs(x))) if n else 0.0, C_FLOOR)
        idx = np.arange(n)
        return TruncationPlan(sign * c, (c,), idx[:0], idx, fallback=True)

    pre, post = split if split is not None else partition(n, rng)
    folded = sign * x[pre]  # nonnegative in both directions
    grid = _grid(np.abs(folded))
    best_c, best = grid[0], -math.inf
    for c in grid:
        score = _truncated_lower(np.minimum(folded, c), c, delta, post.size) if folded.size else -c
        if score > best:
            best_c, best = c, score
    return TruncationPlan(sign * best_c, grid, pre, post)


def bound_mean(samples, delta: float, direction: str, rng=None, *, split=None,
               strict: bool = False) -> float:
    """Select a threshold on the pre slice, then bound the mean on the post slice."""
    x = np.asarray(samples, dtype=float)
    plan = select_threshold(x, delta, direction, rng, split=split, strict=strict)
    post = x[plan.post_idx]
    if direction == "lower":
        return ci_lower_truncated(post, plan.c, delta)
    return ci_upper_truncated(post, plan.c, delta)


# ---------------------------------------------------------------------------
# control variates


def _shift_constant(kind: str, direction: str, spec: ReturnSpec) -> tuple[float, float]:
    """(per-step shift, offset restoring the original expectation)."""
    if kind == "second_moment":
        xi = spec.xi_r if direction == "upper" else spec.xi_r_low
        return xi, spec.c ** 2 * xi
    if kind == "mean":
        r = spec.r_max if direction == "upper" else spec.r_min
        return r, spec.c * r
    raise InvalidInput(f"kind must be 'mean' or 'second_moment', got {kind!r}")


def _check_direction(direction: str) -> None:
    if direction not in ("lower", "upper"):
        raise InvalidInput(f"direction must be 'lower' or 'upper', got {direction!r}")


def shifted_samples(data: Dataset, pi: TabularPolicy, kind: str, direction: str) -> np.ndarray:
    """Control-variate shifted per-trajectory variables over the padded dataset.

    Upper-direction variables are <= 0 with probability one; lower-direction
    variables are >= 0. Adding ``expectation_offset(kind, direction, spec)``
    to their expectation recovers E[rho G^2] or E[rho G].
    """
    _check_direction(direction)
    shift, _ = _shift_constant(kind, direction, data.spec)
    if (data.lengths < data.spec.horizon).any() and not data.spec.r_min <= 0.0 <= data.spec.r_max:
        raise InvalidInput("padding with zero rewards requires r_min <= 0 <= r_max")
    w = data.prefix_ratios(pi)
    disc = data.spec.discounts()
    if kind == "second_moment":
        return coupled_terms(w, data.rewards, disc, xi=shift)
    return np.sum(w * disc * (data.rewards - shift), axis=1)


def expectation_offset(kind: str, direction: str, spec: ReturnSpec) -> float:
    _check_direction(direction)
    return _shift_constant(kind, direction, spec)[1]


def control_variate_shift(kind: str, direction: str, traj: Trajectory, pi: TabularPolicy,
                          spec: ReturnSpec) -> float:
    """The shifted variable for a single trajectory, which must be padded to the horizon."""
    if traj.length < spec.horizon:
        raise UnpaddedTrajectory(f"trajectory has length {traj.length}, horizon is {spec.horizon}")
    return float(shifted_samples(Dataset.from_trajectories([traj], spec), pi, kind, direction)[0])


# ---------------------------------------------------------------------------
# interval propagation and composition


def propagate_square(iv: Interval) -> Interval:
    """Interval for x^2 given an interval for x."""
    lo2, hi2 = iv.lower ** 2, iv.upper ** 2
    upper = max(lo2, hi2)
    lower = 0.0 if iv.lower <= 0.0 <= iv.upper else min(lo2, hi2)
    return Interval(lower, upper, iv.delta)


def clip_interval(iv: Interval, spec: ReturnSpec) -> Interval:
    """Intersect with [0, (g_max - g_min)^2 / 4]; disjoint intervals collapse to the nearer end."""
    cap = spec.popoviciu
    lo, hi = max(iv.lower, 0.0), min(iv.upper, cap)
    if lo <= hi:
        return Interval(lo, hi, iv.delta, iv.degenerate)
    point = cap if iv.lower > cap else 0.0
    return Interval(point, point, iv.delta, True)


def _mean_interval(data, pi, d_lower, d_upper, split, strict) -> Interval:
    spec = data.spec
    y_minus = shifted_samples(data, pi, "mean", "lower")
    y_plus = shifted_samples(data, pi, "mean", "upper")
    lo = bound_mean(y_minus, d_lower, "lower", split=split, strict=strict) + spec.g_min
    hi = bound_mean(y_plus, d_upper, "upper", split=split, strict=strict) + spec.g_max
    # E[rho G] is the on-policy mean return, so it lies in [g_min, g_max].
    lo = min(max(lo, spec.g_min), spec.g_max)
    hi = min(max(hi, spec.g_min), spec.g_max)
    return Interval(min(lo, hi), max(lo, hi), d_lower + d_upper)


def _split_for(data: Dataset, rng, split):
    if split is not None:
        return split
    if len(data) < MIN_SELECTION_SAMPLES:
        return None
    return partition(len(data), rng)


def hcove_upper(data: Dataset, pi: TabularPolicy, delta: float = 0.05, *,
                budget: DeltaBudget | None = None, rng=None, split=None,
                strict: bool = False) -> float:
    """High-confidence upper bound on the variance of returns under ``pi``.

    By default half of ``delta`` goes to the second-moment bound and a quarter
    to each side of the mean bound.
    """
    budget = DeltaBudget.one_sided(delta) if budget is None else budget
    split = _split_for(data, rng, split)
    x = shifted_samples(data, pi, "second_moment", "upper")
    x_ub = bound_mean(x, budget.d3, "upper", split=split, strict=strict) \
        + expectation_offset("second_moment", "upper", data.spec)
    z = propagate_square(_mean_interval(data, pi, budget.d4 / 2, budget.d4 / 2, split, strict))
    return x_ub - z.lower


def hcove_lower(data: Dataset, pi: TabularPolicy, delta: float = 0.05, *,
                budget: DeltaBudget | None = None, rng=None, split=None,
                strict: bool = False, clip: bool = False) -> float:
    """High-confidence lower bound on the variance of returns under ``pi``."""
    budget = DeltaBudget.one_sided(delta) if budget is None else budget
    split = _split_for(data, rng, split)
    x = shifted_samples(data, pi, "second_moment", "lower")
    x_lb = bound_mean(x, budget.d1, "lower", split=split, strict=strict) \
        + expectation_offset("second_moment", "lower", data.spec)
    z = propagate_square(_mean_interval(data, pi, budget.d2 / 2, budget.d2 / 2, split, strict))
    lb = x_lb - z.upper
    return max(lb, 0.0) if clip else lb


def hcove_interval(data: Dataset, pi: TabularPolicy, delta: float = 0.05, *,
                   budget: DeltaBudget | None = None, rng=None, clip: bool = False,
                   strict: bool = False) -> Interval:
    """Two-sided interval whose four sub-bounds together spend at most ``delta``."""
    budget = DeltaBudget.even(delta) if budget is None else budget
    if budget.total > delta * (1 + 1e-12):
        raise InvalidInput(f"budget spends {budget.total}, more than delta = {delta}")
    split = _split_for(data, rng, None)
    lo = hcove_lower(data, pi, budget=budget, split=split, strict=strict)
    hi = hcove_upper(data, pi, budget=budget, split=split, strict=strict)
    # The two sides come from different sub-bounds; when they cross the data
    # are inconsistent at this confidence, and the point midway is reported.
    degenerate = lo > hi
    if degenerate:
        lo = hi = 0.5 * (lo + hi)
    iv = Interval(lo, hi, delta, degenerate)
    return clip_interval(iv, data.spec) if clip else iv
