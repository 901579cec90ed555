"""Shared domain types: return specs, trajectories, datasets, policies and seeding."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Reserved ids for padding steps. A policy assigns probability 1 to PAD_ACTION
# in every state, so padded steps contribute a ratio of exactly 1.
PAD_ACTION = -1
PAD_STATE = -1

# Beyond this many factors ratio products are accumulated in log-space.
LOG_SPACE_MIN_STEPS = 33


class OffVarError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(OffVarError, ValueError):
    pass


class InvalidRange(OffVarError, IndexError):
    pass


class SupportViolation(OffVarError):
    """pi puts mass on an action whose logged behavior probability is zero."""


class InsufficientData(OffVarError):
    pass


class UnpaddedTrajectory(OffVarError):
    pass


class IntractableModel(OffVarError):
    pass


def horizon_factor(gamma: float, horizon: int) -> float:
    """Sum of gamma**j for j in [0, horizon), with the gamma == 1 limit."""
    if gamma == 1.0:
        return float(horizon)
    return (1.0 - gamma**horizon) / (1.0 - gamma)


@dataclass(frozen=True)
class ReturnSpec:
    gamma: float
    horizon: int
    r_min: float
    r_max: float

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise InvalidInput(f"gamma must lie in [0, 1], got {self.gamma}")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise InvalidInput(f"horizon must be a positive integer, got {self.horizon}")
        if self.r_min > self.r_max:
            raise InvalidInput(f"r_min ({self.r_min}) exceeds r_max ({self.r_max})")

    @property
    def c(self) -> float:
        return horizon_factor(self.gamma, self.horizon)

    @property
    def g_min(self) -> float:
        return self.c * self.r_min

    @property
    def g_max(self) -> float:
        return self.c * self.r_max

    @property
    def xi_r(self) -> float:
        return max(self.r_min**2, self.r_max**2)

    @property
    def xi_g(self) -> float:
        return max(self.g_min**2, self.g_max**2)

    @property
    def xi_r_low(self) -> float:
        """Largest constant known to lie below every reward product R_j * R_k.

        Zero whenever the rewards share a sign; negative (r_min * r_max) when
        the reward range straddles zero.
        """
        return min(0.0, self.r_min * self.r_max)

    @property
    def popoviciu(self) -> float:
        """Deterministic upper bound on the variance of any return."""
        return (self.g_max - self.g_min) ** 2 / 4.0

    def discounts(self) -> np.ndarray:
        return self.gamma ** np.arange(self.horizon, dtype=float)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "horizon": self.horizon, "r_min": self.r_min, "r_max": self.r_max}


@dataclass(frozen=True)
class Step:
    s: int
    a: int
    b_prob: float
    r: float


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        for st in self.steps:
            if not (0.0 <= st.b_prob <= 1.0):
                raise InvalidInput(f"behavior probability {st.b_prob} outside [0, 1]")

    @property
    def length(self) -> int:
        return len(self.steps)

    @classmethod
    def from_arrays(cls, states, actions, b_probs, rewards) -> "Trajectory":
        return cls(tuple(Step(int(s), int(a), float(b), float(r))
                         for s, a, b, r in zip(states, actions, b_probs, rewards)))

    def to_json(self) -> str:
        return json.dumps({"steps": [{"s": st.s, "a": st.a, "b_prob": st.b_prob, "r": st.r}
                                     for st in self.steps]})

    @classmethod
    def from_json(cls, line: str) -> "Trajectory":
        obj = json.loads(line)
        try:
            return cls(tuple(Step(int(d["s"]), int(d["a"]), float(d["b_prob"]), float(d["r"]))
                             for d in obj["steps"]))
        except (KeyError, TypeError) as exc:
            raise InvalidInput(f"malformed trajectory record: {exc}") from exc


@dataclass(frozen=True)
class TabularPolicy:
    """Action distribution per state, stored as a (num_states, num_actions) array."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise InvalidInput("policy table must be 2-D (states x actions)")
        if np.any(p < 0):
            raise InvalidInput("policy has negative probabilities")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-12):
            raise InvalidInput("policy rows must sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]

    def prob(self, s: int, a: int) -> float:
        if a == PAD_ACTION:
            return 1.0
        return float(self.probs[s, a])

    def lookup(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Vectorised pi(a|s); padding actions map to 1."""
        pad = actions == PAD_ACTION
        out = np.ones(states.shape, dtype=float)
        live = ~pad
        out[live] = self.probs[states[live], actions[live]]
        return out

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "TabularPolicy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions: Sequence[int], num_actions: int) -> "TabularPolicy":
        p = np.zeros((len(actions), num_actions))
        p[np.arange(len(actions)), actions] = 1.0
        return cls(p)

    def to_dict(self) -> dict:
        return {"probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularPolicy":
        return cls(np.asarray(d["probs"], dtype=float))


class SeededRng:
    """A (seed, stream) pair that always yields the same PCG64 draw sequence.

    Streams may be a single integer or a tuple of integers; ``child`` appends
    keys so that independent sub-streams can be derived hierarchically.
    """

    def __init__(self, seed: int, stream: int | Sequence[int] = ()):
        self.seed = int(seed)
        self.stream = (int(stream),) if np.isscalar(stream) else tuple(int(s) for s in stream)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, self.stream + tuple(int(k) for k in keys))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, SeededRng):
        return rng.generator()
    if rng is None or isinstance(rng, (int, np.integer)):
        return SeededRng(0 if rng is None else int(rng)).generator()
    raise TypeError(f"cannot build a generator from {rng!r}")


def _ratio_products(factors: np.ndarray) -> np.ndarray:
    """Running products along the last axis; log-space for long products."""
    if factors.shape[-1] < LOG_SPACE_MIN_STEPS:
        return np.cumprod(factors, axis=-1)
    with np.errstate(divide="ignore"):
        return np.exp(np.cumsum(np.log(factors), axis=-1))


def importance_ratio(traj: Trajectory, pi: TabularPolicy, start: int, stop: int) -> float:
    """Product of pi(a_j|s_j) / b_j over steps start..stop (inclusive).

    An empty range (start > stop) gives 1.
    """
    if start > stop:
        if start < 0 or stop < -1 or start > traj.length:
            raise InvalidRange(f"range ({start}, {stop}) outside trajectory of length {traj.length}")
        return 1.0
    if start < 0 or stop >= traj.length:
        raise InvalidRange(f"range ({start}, {stop}) outside trajectory of length {traj.length}")
    factors = np.empty(stop - start + 1)
    for k, st in enumerate(traj.steps[start:stop + 1]):
        p = pi.prob(st.s, st.a)
        if st.b_prob == 0.0:
            if p > 0.0:
                raise SupportViolation(f"pi({st.a}|{st.s}) = {p} but logged behavior probability is 0")
            factors[k] = 0.0
        else:
            factors[k] = p / st.b_prob
    return float(_ratio_products(factors)[-1])


def discounted_return(traj: Trajectory, spec: ReturnSpec) -> float:
    g = 0.0
    disc = 1.0
    for st in traj.steps:
        g += disc * st.r
        disc *= spec.gamma
    return g


def _check_padding_reward(spec: ReturnSpec) -> None:
    if not (spec.r_min <= 0.0 <= spec.r_max):
        raise InvalidInput("padding with zero rewards requires r_min <= 0 <= r_max")


def pad_trajectory(traj: Trajectory, spec: ReturnSpec) -> Trajectory:
    """Extend ``traj`` to the full horizon with zero-reward, unit-ratio steps."""
    if traj.length > spec.horizon:
        raise InvalidRange(f"trajectory length {traj.length} exceeds horizon {spec.horizon}")
    missing = spec.horizon - traj.length
    if missing == 0:
        return traj
    _check_padding_reward(spec)
    return Trajectory(traj.steps + (Step(PAD_STATE, PAD_ACTION, 1.0, 0.0),) * missing)


@dataclass(frozen=True)
class Dataset:
    """Array-backed collection of trajectories sharing one ReturnSpec.

    Every array has shape (n, horizon). Positions at or beyond a trajectory's
    length hold padding values (PAD_STATE, PAD_ACTION, probability 1, reward 0),
    so computations over the full width see the padded trajectory.
    """

    states: np.ndarray
    actions: np.ndarray
    b_probs: np.ndarray
    rewards: np.ndarray
    lengths: np.ndarray
    spec: ReturnSpec = field(compare=False)

    def __post_init__(self):
        n, width = self.rewards.shape
        if n == 0:
            raise InvalidInput("a dataset needs at least one trajectory")
        if width != self.spec.horizon:
            raise InvalidInput(f"array width {width} does not match horizon {self.spec.horizon}")
        for name in ("states", "actions", "b_probs"):
            if getattr(self, name).shape != (n, width):
                raise InvalidInput(f"{name} has shape {getattr(self, name).shape}, expected {(n, width)}")
        if np.any(self.lengths > width):
            raise InvalidRange("trajectory longer than the horizon")
        for name in ("states", "actions", "b_probs", "rewards", "lengths"):
            getattr(self, name).setflags(write=False)

    def __len__(self) -> int:
        return self.rewards.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    @classmethod
    def from_trajectories(cls, trajectories: Iterable[Trajectory], spec: ReturnSpec) -> "Dataset":
        trajectories = list(trajectories)
        n, T = len(trajectories), spec.horizon
        if n == 0:
            raise InvalidInput("a dataset needs at least one trajectory")
        states = np.full((n, T), PAD_STATE, dtype=np.int64)
        actions = np.full((n, T), PAD_ACTION, dtype=np.int64)
        b_probs = np.ones((n, T))
        rewards = np.zeros((n, T))
        lengths = np.zeros(n, dtype=np.int64)
        for i, traj in enumerate(trajectories):
            if traj.length > T:
                raise InvalidRange(f"trajectory {i} has length {traj.length} > horizon {T}")
            lengths[i] = traj.length
            for j, st in enumerate(traj.steps):
                states[i, j], actions[i, j], b_probs[i, j], rewards[i, j] = st.s, st.a, st.b_prob, st.r
        return cls(states, actions, b_probs, rewards, lengths, spec)

    def trajectory(self, i: int) -> Trajectory:
        L = int(self.lengths[i])
        return Trajectory.from_arrays(self.states[i, :L], self.actions[i, :L],
                                      self.b_probs[i, :L], self.rewards[i, :L])

    @property
    def trajectories(self) -> list[Trajectory]:
        return [self.trajectory(i) for i in range(len(self))]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.states[idx], self.actions[idx], self.b_probs[idx],
                       self.rewards[idx], self.lengths[idx], self.spec)

    def concat(self, other: "Dataset") -> "Dataset":
        if other.spec != self.spec:
            raise InvalidInput("cannot concatenate datasets with different specs")
        return Dataset(*(np.concatenate([getattr(self, k), getattr(other, k)])
                         for k in ("states", "actions", "b_probs", "rewards", "lengths")), self.spec)

    def returns(self) -> np.ndarray:
        return self.rewards @ self.spec.discounts()

    def step_ratios(self, pi: TabularPolicy) -> np.ndarray:
        """Per-step pi/b ratios, shape (n, horizon); padding positions are 1."""
        p = pi.lookup(self.states, self.actions)
        zero_b = self.b_probs == 0.0
        if np.any(zero_b & (p > 0.0)):
            raise SupportViolation("pi puts mass on a logged action with behavior probability 0")
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(zero_b, 0.0, p / np.where(zero_b, 1.0, self.b_probs))
        return r

    def prefix_ratios(self, pi: TabularPolicy) -> np.ndarray:
        """rho(0, j) for every trajectory and step j, shape (n, horizon)."""
        return _ratio_products(self.step_ratios(pi))

    def to_jsonl(self, path: str | Path) -> None:
        Path(path).write_text("".join(self.trajectory(i).to_json() + "\n" for i in range(len(self))))

    @classmethod
    def from_jsonl(cls, path: str | Path, spec: ReturnSpec) -> "Dataset":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        return cls.from_trajectories((Trajectory.from_json(ln) for ln in lines), spec)
