"""Coverage and estimator-comparison experiments.

Every (trial, n) cell draws its dataset from its own RNG stream, so growing the
n grid or running trials in parallel never changes existing cells.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .bootstrap import BootstrapConfig, bootstrap_interval
from .bounds import hcove_interval
from .core import Dataset, IntractableModel, InvalidInput, OffVarError, SeededRng
from .envs import (OracleMoments, TabularMdp, enumerate_trajectories, load_environment,
                   load_policy, mix_behavior, oracle_moments, sample_dataset)
from .estimators import ESTIMATORS

POINT_METHODS = ("naive_is", "naive_plugin", "double_sampled", "variance_reduced")
INTERVAL_METHODS = ("hcove_ci", "bootstrap")
METHODS = POINT_METHODS + INTERVAL_METHODS
COLUMNS = ("trial", "method", "n", "point_raw", "point_clipped", "lower", "upper", "oracle", "failed", "status")

# Sub-stream ids inside a (trial, n) cell.
_DATA, _SHUFFLE, _BOOT = 0, 1, 2

MAX_EXHAUSTIVE = 2_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "gridworld"
    policy: str = "near_optimal"
    alpha: float = 0.5
    n_grid: tuple[int, ...] = (50, 200, 1000, 2000, 10000)
    trials: int = 100
    delta: float = 0.05
    methods: tuple[str, ...] = METHODS
    bootstrap_b: int = 1000
    bootstrap_estimator: str = "variance_reduced"
    seed: int = 0
    clip: bool = False
    out: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.trials < 1:
            raise InvalidInput("trials must be at least 1")
        if not self.n_grid or min(self.n_grid) < 2:
            raise InvalidInput("every n in the grid must be at least 2")
        if not self.methods:
            raise InvalidInput("at least one method is required")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise InvalidInput(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if not (0.0 < self.delta <= 0.5):
            raise InvalidInput(f"delta must lie in (0, 0.5], got {self.delta}")


@dataclass
class CoverageReport:
    config: ExperimentConfig
    oracle: OracleMoments
    rows: list[dict]
    summary: list[dict] = field(default_factory=list)

    def cell(self, method: str, n: int) -> dict:
        for s in self.summary:
            if s["method"] == method and s["n"] == n:
                return s
        raise KeyError((method, n))

    def failure_fraction(self, method: str, n: int) -> float:
        return self.cell(method, n)["failure_fraction"]

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow(["" if r[c] is None else _fmt(r[c]) for c in COLUMNS])
        return buf.getvalue()

    def summary_csv(self) -> str:
        if not self.summary:
            return ""
        buf = io.StringIO()
        keys = list(self.summary[0])
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for s in self.summary:
            w.writerow(["" if s[k] is None else _fmt(s[k]) for k in keys])
        return buf.getvalue()

    def to_json(self) -> str:
        # The output location is not part of the experiment, so runs written to
        # different directories stay byte-identical.
        config = {k: v for k, v in asdict(self.config).items() if k != "out"}
        return json.dumps({"config": config, "oracle": asdict(self.oracle),
                           "summary": self.summary, "rows": self.rows},
                          indent=1, sort_keys=True, allow_nan=False)

    def write(self, out_dir: str | Path, prefix: str = "coverage") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{prefix}_rows.csv", out / f"{prefix}_summary.csv", out / f"{prefix}.json"]
        paths[0].write_text(self.rows_csv())
        paths[1].write_text(self.summary_csv())
        paths[2].write_text(self.to_json())
        return paths


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


@lru_cache(maxsize=8)
def _setup(env: str, policy: str, alpha: float):
    mdp = load_environment(env)
    pi = load_policy(mdp, policy)
    return mdp, pi, mix_behavior(pi, alpha), oracle_moments(mdp, pi)


def _row(trial, method, n, oracle, point=None, interval=None, status="ok") -> dict:
    row = dict.fromkeys(COLUMNS)
    row.update(trial=trial, method=method, n=n, oracle=oracle, status=status)
    if point is not None:
        row["point_raw"] = point.raw
        row["point_clipped"] = point.clipped
    if interval is not None:
        row["lower"] = interval.lower
        row["upper"] = interval.upper
        row["failed"] = not interval.contains(oracle)
    return row


def _cell_rows(cfg: ExperimentConfig, mdp, pi, beta, oracle: float, trial: int, n: int) -> list[dict]:
    cell = SeededRng(cfg.seed, (trial, n))
    data = sample_dataset(mdp, beta, n, cell.child(_DATA))
    rows = []
    point_cache = {}

    def point(name):
        if name not in point_cache:
            point_cache[name] = ESTIMATORS[name](data, pi, popoviciu=cfg.clip)
        return point_cache[name]

    for method in sorted(cfg.methods):
        try:
            if method in POINT_METHODS:
                rows.append(_row(trial, method, n, oracle, point=point(method)))
            elif method == "hcove_ci":
                iv = hcove_interval(data, pi, cfg.delta, rng=cell.child(_SHUFFLE), clip=cfg.clip, strict=True)
                rows.append(_row(trial, method, n, oracle, point=point("variance_reduced"), interval=iv))
            else:
                bcfg = BootstrapConfig(cfg.bootstrap_b, cfg.delta, cfg.seed)
                iv = bootstrap_interval(data, pi, bcfg, cfg.bootstrap_estimator, clip=cfg.clip,
                                        rng=cell.child(_BOOT))
                rows.append(_row(trial, method, n, oracle, point=point(cfg.bootstrap_estimator), interval=iv))
        except OffVarError as exc:
            rows.append(_row(trial, method, n, oracle, status=f"skipped: {type(exc).__name__}: {exc}"))
    return rows


def _trial_rows(cfg: ExperimentConfig, trial: int) -> list[dict]:
    mdp, pi, beta, oracle = _setup(cfg.env, cfg.policy, cfg.alpha)
    rows = []
    for n in cfg.n_grid:
        rows.extend(_cell_rows(cfg, mdp, pi, beta, oracle.variance, trial, n))
    return rows


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def summarize(rows: list[dict], cfg: ExperimentConfig, oracle: float) -> list[dict]:
    out = []
    for method in sorted(cfg.methods):
        for n in cfg.n_grid:
            cell = [r for r in rows if r["method"] == method and r["n"] == n]
            ok = [r for r in cell if r["status"] == "ok"]
            pts = [r["point_raw"] for r in ok if r["point_raw"] is not None]
            s = {"method": method, "n": n, "trials": len(cell), "completed": len(ok), "oracle": oracle,
                 "mean_point": _mean(pts),
                 "sd_point": float(np.std(pts, ddof=1)) if len(pts) > 1 else None,
                 "se_point": float(np.std(pts, ddof=1) / math.sqrt(len(pts))) if len(pts) > 1 else None}
            if method in INTERVAL_METHODS:
                failed = sum(bool(r["failed"]) for r in ok)
                frac = failed / len(ok) if ok else None
                s.update(
                    failure_count=failed,
                    failure_fraction=frac,
                    failure_se=math.sqrt(frac * (1 - frac) / len(ok)) if ok else None,
                    lower_failures=sum(r["lower"] > oracle for r in ok),
                    upper_failures=sum(r["upper"] < oracle for r in ok),
                    mean_lower=_mean([r["lower"] for r in ok]),
                    mean_upper=_mean([r["upper"] for r in ok]),
                    mean_width=_mean([r["upper"] - r["lower"] for r in ok]),
                )
            else:
                s.update(failure_count=None, failure_fraction=None, failure_se=None, lower_failures=None,
                         upper_failures=None, mean_lower=None, mean_upper=None, mean_width=None)
            out.append(s)
    return out


def run_coverage(cfg: ExperimentConfig, jobs: int = 1) -> CoverageReport:
    """Repeat the estimate/interval computation over ``cfg.trials`` fresh datasets per n."""
    _, _, _, oracle = _setup(cfg.env, cfg.policy, cfg.alpha)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_trial_rows, itertools.repeat(cfg, cfg.trials), range(cfg.trials)))
    else:
        chunks = [_trial_rows(cfg, t) for t in range(cfg.trials)]
    rows = sorted((r for chunk in chunks for r in chunk), key=lambda r: (r["trial"], r["method"], r["n"]))
    report = CoverageReport(cfg, oracle, rows, summarize(rows, cfg, oracle.variance))
    if cfg.out:
        report.write(cfg.out)
    return report


# ---------------------------------------------------------------------------
# estimator comparison


def _weighted_stats(values: np.ndarray, weights: np.ndarray) -> tuple[float, float]:
    mean = float(np.sum(weights * values))
    return mean, float(math.sqrt(max(np.sum(weights * (values - mean) ** 2), 0.0)))


def exhaustive_values(mdp: TabularMdp, pi, beta, n: int, methods) -> tuple[dict, np.ndarray]:
    """Every method on every ordered size-n dataset beta can produce, with probabilities."""
    outcomes = enumerate_trajectories(mdp, beta)
    K = len(outcomes)
    if K ** n > MAX_EXHAUSTIVE:
        raise IntractableModel(f"{K}^{n} datasets is too many to enumerate")
    probs = np.array([p for p, _ in outcomes])
    pool = Dataset.from_trajectories([t for _, t in outcomes], mdp.spec)
    values = {m: [] for m in methods}
    weights = []
    for combo in itertools.product(range(K), repeat=n):
        data = pool.subset(combo)
        weights.append(float(np.prod(probs[list(combo)])))
        for m in methods:
            values[m].append(ESTIMATORS[m](data, pi).raw)
    return {m: np.array(v) for m, v in values.items()}, np.array(weights)


def run_estimator_comparison(cfg: ExperimentConfig, exhaustive: bool = False) -> list[dict]:
    """Mean and standard deviation of every point estimator per n.

    With ``exhaustive`` the statistics are exact probability-weighted moments
    over all possible datasets instead of averages over sampled trials.
    """
    mdp, pi, beta, oracle = _setup(cfg.env, cfg.policy, cfg.alpha)
    methods = [m for m in sorted(cfg.methods) if m in POINT_METHODS]
    if not methods:
        raise InvalidInput("comparison needs at least one point estimator")
    table = []
    for n in cfg.n_grid:
        if exhaustive:
            values, weights = exhaustive_values(mdp, pi, beta, n, methods)
            for m in methods:
                mean, sd = _weighted_stats(values[m], weights)
                table.append({"method": m, "n": n, "mean": mean, "std": sd, "trials": int(weights.size),
                              "oracle": oracle.variance, "mode": "exhaustive"})
            continue
        vals = {m: [] for m in methods}
        for t in range(cfg.trials):
            data = sample_dataset(mdp, beta, n, SeededRng(cfg.seed, (t, n)).child(_DATA))
            for m in methods:
                vals[m].append(ESTIMATORS[m](data, pi).raw)
        for m in methods:
            v = np.array(vals[m])
            table.append({"method": m, "n": n, "mean": float(v.mean()),
                          "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
                          "trials": cfg.trials, "oracle": oracle.variance, "mode": "sampled"})
    return table


def table_csv(table: list[dict]) -> str:
    if not table:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(table[0]))
    for r in table:
        w.writerow([_fmt(v) for v in r.values()])
    return buf.getvalue()
