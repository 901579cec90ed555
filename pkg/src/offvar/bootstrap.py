"""Percentile-pivot bootstrap intervals for the variance of returns."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bounds import Interval, clip_interval
from .core import Dataset, InsufficientData, InvalidInput, SeededRng, TabularPolicy, as_generator
from .estimators import SplitPlan, split_combine, split_statistics


@dataclass(frozen=True)
class BootstrapConfig:
    b: int = 1000
    delta: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.b < 100:
            raise InvalidInput(f"need at least 100 bootstrap datasets, got {self.b}")
        if not (0.0 < self.delta <= 0.5):
            raise InvalidInput(f"delta must lie in (0, 0.5], got {self.delta}")


def resample_indices(n: int, rng) -> np.ndarray:
    return as_generator(rng).integers(0, n, size=n)


def resample(data: Dataset, rng) -> Dataset:
    """Draw len(data) trajectories with replacement."""
    return data.subset(resample_indices(len(data), rng))


def bootstrap_estimates(data: Dataset, pi: TabularPolicy, cfg: BootstrapConfig,
                        estimator: str = "variance_reduced", *,
                        rng: SeededRng | None = None) -> tuple[float, np.ndarray]:
    """Point estimate on ``data`` and the estimate on each of the B pseudo-datasets.

    Pseudo-dataset ``i`` is drawn from child stream ``i`` of ``rng`` (default
    ``SeededRng(cfg.seed)``) and re-split even/odd in its own resampled order.
    """
    n = len(data)
    if n < 2:
        raise InsufficientData(f"need at least 2 trajectories, got {n}")
    second, first = split_statistics(data, pi, estimator)
    split = SplitPlan.even_odd(n)
    point = split_combine(second, first, split)
    root = SeededRng(cfg.seed) if rng is None else rng
    stars = np.empty(cfg.b)
    for i in range(cfg.b):
        idx = resample_indices(n, root.child(i))
        stars[i] = split_combine(second[idx], first[idx], split)
    return point, stars


def bootstrap_interval(data: Dataset, pi: TabularPolicy, cfg: BootstrapConfig | None = None,
                       estimator: str = "variance_reduced", *, clip: bool = False,
                       rng: SeededRng | None = None) -> Interval:
    cfg = BootstrapConfig() if cfg is None else cfg
    point, stars = bootstrap_estimates(data, pi, cfg, estimator, rng=rng)
    pivots = stars - point
    z_lo, z_hi = np.quantile(pivots, [cfg.delta / 2, 1 - cfg.delta / 2], method="linear")
    degenerate = bool(np.all(stars == stars[0]))
    iv = Interval(float(point - z_hi), float(point - z_lo), cfg.delta, degenerate)
    return clip_interval(iv, data.spec) if clip else iv
