"""Point estimators of the variance of returns from off-policy data.

Four estimators are provided:

* ``naive_is_variance``: sample variance of the importance-weighted returns.
  Biased and inconsistent; kept for comparison.
* ``naive_plugin_variance``: plug-in estimate of E_b[rho (G - E_b[rho G])^2].
  Consistent but biased.
* ``double_sampled_variance``: mean of rho G^2 over all trajectories minus the
  product of two rho G means taken over disjoint halves of the data. Unbiased.
* ``variance_reduced_variance``: the same construction with the coupled-decision
  second moment and per-decision means in place of full-trajectory weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, InsufficientData, InvalidInput, TabularPolicy

# Trajectories per block when forming (n, T, T) coupled-reward tensors.
_CHUNK = 4096


@dataclass(frozen=True)
class SplitPlan:
    indices_d1: np.ndarray
    indices_d2: np.ndarray

    def __post_init__(self):
        d1 = np.asarray(self.indices_d1, dtype=np.int64)
        d2 = np.asarray(self.indices_d2, dtype=np.int64)
        if np.intersect1d(d1, d2).size:
            raise InvalidInput("split halves overlap")
        if abs(d1.size - d2.size) > 1:
            raise InvalidInput("split halves differ in size by more than one")
        object.__setattr__(self, "indices_d1", d1)
        object.__setattr__(self, "indices_d2", d2)

    @property
    def n(self) -> int:
        return self.indices_d1.size + self.indices_d2.size

    def covers(self, n: int) -> bool:
        both = np.concatenate([self.indices_d1, self.indices_d2])
        return both.size == n and np.array_equal(np.sort(both), np.arange(n))

    @classmethod
    def even_odd(cls, n: int) -> "SplitPlan":
        """D1 takes even positions, D2 odd ones; an odd n leaves D1 one larger."""
        idx = np.arange(n)
        return cls(idx[0::2], idx[1::2])

    @classmethod
    def shuffled(cls, n: int, rng: np.random.Generator) -> "SplitPlan":
        perm = rng.permutation(n)
        return cls(np.sort(perm[: (n + 1) // 2]), np.sort(perm[(n + 1) // 2:]))


@dataclass(frozen=True)
class VarianceEstimate:
    raw: float
    clipped: float
    n: int
    method: str

    @classmethod
    def build(cls, raw: float, n: int, method: str, cap: float | None = None) -> "VarianceEstimate":
        clipped = max(raw, 0.0)
        if cap is not None:
            clipped = min(clipped, cap)
        return cls(float(raw), float(clipped), int(n), method)


# ---------------------------------------------------------------------------
# per-trajectory building blocks


def is_weighted(data: Dataset, pi: TabularPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Full-trajectory importance ratios rho_i and returns G_i."""
    rho = data.prefix_ratios(pi)[:, -1]
    return rho, data.returns()


def pdis_terms(data: Dataset, pi: TabularPolicy) -> np.ndarray:
    """Per-trajectory sum_j rho(0, j) gamma^j R_j."""
    w = data.prefix_ratios(pi)
    return np.sum(w * data.rewards * data.spec.discounts(), axis=1)


def coupled_terms(w: np.ndarray, rewards: np.ndarray, discounts: np.ndarray, xi: float = 0.0) -> np.ndarray:
    """sum_j sum_k w[:, max(j, k)] gamma^(j+k) (R_j R_k - xi) for each row.

    ``w`` holds prefix ratios rho(0, j). Each summand is formed separately so
    the sign of (R_j R_k - xi) carries through to the total without rounding
    cancellation.
    """
    n, T = rewards.shape
    jj, kk = np.meshgrid(np.arange(T), np.arange(T), indexing="ij")
    later = np.maximum(jj, kk)
    disc2 = np.outer(discounts, discounts)
    out = np.empty(n)
    for lo in range(0, n, _CHUNK):
        r = rewards[lo:lo + _CHUNK]
        prod = r[:, :, None] * r[:, None, :]
        if xi != 0.0:
            prod = prod - xi
        out[lo:lo + _CHUNK] = np.sum(w[lo:lo + _CHUNK][:, later] * disc2 * prod, axis=(1, 2))
    return out


def cdis_terms(data: Dataset, pi: TabularPolicy) -> np.ndarray:
    """Per-trajectory coupled-decision estimate of rho G^2."""
    return coupled_terms(data.prefix_ratios(pi), data.rewards, data.spec.discounts())


def pdis_mean(data: Dataset, pi: TabularPolicy) -> float:
    return float(np.mean(pdis_terms(data, pi)))


def cdis_second_moment(data: Dataset, pi: TabularPolicy) -> float:
    return float(np.mean(cdis_terms(data, pi)))


# ---------------------------------------------------------------------------
# estimators


def _need_two(data: Dataset) -> int:
    n = len(data)
    if n < 2:
        raise InsufficientData(f"need at least 2 trajectories, got {n}")
    return n


def _cap(data: Dataset, popoviciu: bool) -> float | None:
    return data.spec.popoviciu if popoviciu else None


def naive_is_variance(data: Dataset, pi: TabularPolicy, *, popoviciu: bool = False) -> VarianceEstimate:
    n = _need_two(data)
    rho, g = is_weighted(data, pi)
    x = rho * g
    raw = np.sum((x - x.mean()) ** 2) / (n - 1)
    return VarianceEstimate.build(raw, n, "naive_is", _cap(data, popoviciu))


def naive_plugin_variance(data: Dataset, pi: TabularPolicy, *, popoviciu: bool = False) -> VarianceEstimate:
    n = _need_two(data)
    rho, g = is_weighted(data, pi)
    mean = np.mean(rho * g)
    raw = np.sum(rho * (g - mean) ** 2) / (n - 1)
    return VarianceEstimate.build(raw, n, "naive_plugin", _cap(data, popoviciu))


def split_combine(second: np.ndarray, first: np.ndarray, split: SplitPlan) -> float:
    """mean(second) over everything minus mean(first|D1) * mean(first|D2)."""
    if split.indices_d1.size == 0 or split.indices_d2.size == 0:
        raise InsufficientData("both halves of the split must be non-empty")
    if not split.covers(second.size):
        raise InvalidInput("split plan does not cover the dataset")
    return float(np.mean(second) - np.mean(first[split.indices_d1]) * np.mean(first[split.indices_d2]))


def double_sampled_variance(data: Dataset, pi: TabularPolicy, split: SplitPlan | None = None, *,
                            popoviciu: bool = False) -> VarianceEstimate:
    n = _need_two(data)
    split = SplitPlan.even_odd(n) if split is None else split
    raw = split_combine(*split_statistics(data, pi, "double_sampled"), split)
    return VarianceEstimate.build(raw, n, "double_sampled", _cap(data, popoviciu))


def variance_reduced_variance(data: Dataset, pi: TabularPolicy, split: SplitPlan | None = None, *,
                              popoviciu: bool = False) -> VarianceEstimate:
    n = _need_two(data)
    split = SplitPlan.even_odd(n) if split is None else split
    raw = split_combine(*split_statistics(data, pi, "variance_reduced"), split)
    return VarianceEstimate.build(raw, n, "variance_reduced", _cap(data, popoviciu))


ESTIMATORS = {
    "naive_is": naive_is_variance,
    "naive_plugin": naive_plugin_variance,
    "double_sampled": double_sampled_variance,
    "variance_reduced": variance_reduced_variance,
}


def split_statistics(data: Dataset, pi: TabularPolicy, estimator: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-trajectory (second-moment, first-moment) terms for a split estimator."""
    if estimator == "double_sampled":
        rho, g = is_weighted(data, pi)
        return rho * (g * g), rho * g
    if estimator == "variance_reduced":
        w = data.prefix_ratios(pi)
        disc = data.spec.discounts()
        return coupled_terms(w, data.rewards, disc), np.sum(w * data.rewards * disc, axis=1)
    raise InvalidInput(f"unknown split estimator {estimator!r}")
