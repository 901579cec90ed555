"""Tabular environments, behavior-policy mixing, sampling and exact moment oracles."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import (PAD_ACTION, PAD_STATE, Dataset, IntractableModel, InvalidInput, OffVarError,
                   ReturnSpec, Step, TabularPolicy, Trajectory, as_generator, discounted_return)

MAX_DP_WORK = 5e7
MAX_ENUMERATED = 1_000_000


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with rewards keyed on (state, action, next state).

    ``transition[s, a, s2]`` and ``reward[s, a, s2]`` have shape (S, A, S).
    Episodes stop on entering a terminal state or after ``spec.horizon`` steps.
    """

    transition: np.ndarray
    reward: np.ndarray
    d0: np.ndarray
    terminal: frozenset
    spec: ReturnSpec
    name: str = "custom"
    policies: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        R = np.array(self.reward, dtype=float)
        d0 = np.array(self.d0, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape:
            raise InvalidInput("transition and reward must both have shape (S, A, S)")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > 1e-12):
            raise InvalidInput("transition rows must be probability vectors")
        if d0.shape != (P.shape[0],) or np.any(d0 < 0) or abs(d0.sum() - 1.0) > 1e-12:
            raise InvalidInput("start distribution must be a probability vector over states")
        reachable = P > 0
        if np.any((R < self.spec.r_min) & reachable) or np.any((R > self.spec.r_max) & reachable):
            raise InvalidInput("rewards fall outside [r_min, r_max]")
        term = frozenset(int(s) for s in self.terminal)
        for s in term:
            if not (np.all(P[s, :, s] == 1.0) and np.all(R[s, :, s] == 0.0)):
                raise InvalidInput(f"terminal state {s} must self-loop with reward 0")
        for arr in (P, R, d0):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "d0", d0)
        object.__setattr__(self, "terminal", term)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def terminal_mask(self) -> np.ndarray:
        m = np.zeros(self.num_states, dtype=bool)
        m[list(self.terminal)] = True
        return m

    def policy(self, name: str) -> TabularPolicy:
        try:
            return self.policies[name]
        except KeyError:
            raise InvalidInput(f"environment {self.name!r} has no policy {name!r}; "
                               f"known: {sorted(self.policies)}") from None

    def check_policy(self, pi: TabularPolicy) -> None:
        if pi.probs.shape != (self.num_states, self.num_actions):
            raise InvalidInput(f"policy shape {pi.probs.shape} does not match "
                               f"({self.num_states}, {self.num_actions})")


def _terminal_loops(P: np.ndarray, terminal) -> None:
    for s in terminal:
        P[s] = 0.0
        P[s, :, s] = 1.0


# ---------------------------------------------------------------------------
# shipped environments


def counterexample_mdp() -> TabularMdp:
    """Single decision from S0: action a pays 1, action b pays 0; S3 absorbs."""
    P = np.zeros((4, 2, 4))
    R = np.zeros((4, 2, 4))
    P[0, 0, 1] = 1.0
    R[0, 0, 1] = 1.0
    P[0, 1, 2] = 1.0
    P[1, :, 3] = 1.0
    P[2, :, 3] = 1.0
    _terminal_loops(P, [3])
    d0 = np.array([1.0, 0.0, 0.0, 0.0])
    spec = ReturnSpec(gamma=1.0, horizon=1, r_min=0.0, r_max=1.0)
    policies = {
        "det_a": TabularPolicy.deterministic([0, 0, 0, 0], 2),
        "det_b": TabularPolicy.deterministic([1, 1, 1, 1], 2),
        "uniform": TabularPolicy.uniform(4, 2),
    }
    return TabularMdp(P, R, d0, frozenset({3}), spec, "counterexample", policies)


GRID_SIZE = 4
GRID_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))
GRID_MOVE_NAMES = ("up", "down", "left", "right", "up_left", "up_right", "down_left", "down_right")
GRID_SUCCESS = 0.9
GRID_STEP_REWARD = -1.0
GRID_GOAL_REWARD = 0.0
GRID_GAMMA = 0.95
GRID_HORIZON = 30
GRID_EXPLORATION = 0.5
# Greedy action per cell from value iteration on gridworld(); cell 15 is the goal.
GRIDWORLD_GREEDY = (7, 7, 7, 1, 7, 7, 7, 1, 7, 7, 7, 1, 3, 3, 3, 0)


def _grid_step(cell: int, move: int) -> int:
    r, c = divmod(cell, GRID_SIZE)
    dr, dc = GRID_MOVES[move]
    r = min(max(r + dr, 0), GRID_SIZE - 1)
    c = min(max(c + dc, 0), GRID_SIZE - 1)
    return r * GRID_SIZE + c


def gridworld(step_reward: float = GRID_STEP_REWARD, goal_reward: float = GRID_GOAL_REWARD,
              success: float = GRID_SUCCESS, exploration: float = GRID_EXPLORATION) -> TabularMdp:
    """4x4 grid, eight moves, slippery transitions, goal in the far corner.

    The chosen move happens with probability 0.8; otherwise one of the other
    seven moves is taken uniformly. Moves off the grid are clipped to the
    border. Every step costs 1 except the one entering the goal, which is free
    and ends the episode.
    """
    S, A = GRID_SIZE * GRID_SIZE, len(GRID_MOVES)
    goal = S - 1
    P = np.zeros((S, A, S))
    R = np.zeros((S, A, S))
    slip = (1.0 - success) / (A - 1)
    for s in range(S):
        if s == goal:
            continue
        for a in range(A):
            for m in range(A):
                P[s, a, _grid_step(s, m)] += success if m == a else slip
            R[s, a, :] = step_reward
            R[s, a, goal] = goal_reward
    _terminal_loops(P, [goal])
    R[goal] = 0.0
    d0 = np.zeros(S)
    d0[0] = 1.0
    spec = ReturnSpec(GRID_GAMMA, GRID_HORIZON, min(0.0, step_reward, goal_reward),
                      max(0.0, step_reward, goal_reward))
    greedy = TabularPolicy.deterministic(GRIDWORLD_GREEDY, A)
    policies = {
        "near_optimal": soften(greedy, exploration),
        "greedy": greedy,
        "uniform": TabularPolicy.uniform(S, A),
    }
    return TabularMdp(P, R, d0, frozenset({goal}), spec, "gridworld", policies)


# (success probability, high reward, low reward) per item
RECOMMENDER_ITEMS = (
    (0.9, 1.0, 0.0),
    (0.5, 1.0, 0.0),
    (0.2, 1.0, 0.0),
    (0.7, 0.8, 0.4),
    (0.5, 0.3, 0.1),
)


def recommender(items=RECOMMENDER_ITEMS, exploration: float = 0.1) -> TabularMdp:
    """One-step recommendation with a two-point reward per item.

    State 0 is the user; recommending item k moves to the "liked" state 1 with
    probability p_k (reward hi_k) or to the "not liked" state 2 (reward lo_k).
    Both outcome states are terminal.
    """
    K = len(items)
    P = np.zeros((3, K, 3))
    R = np.zeros((3, K, 3))
    for k, (p, hi, lo) in enumerate(items):
        P[0, k, 1], P[0, k, 2] = p, 1.0 - p
        R[0, k, 1], R[0, k, 2] = hi, lo
    _terminal_loops(P, [1, 2])
    rewards = [r for _, hi, lo in items for r in (hi, lo)]
    spec = ReturnSpec(1.0, 1, min(0.0, min(rewards)), max(0.0, max(rewards)))
    means = [p * hi + (1 - p) * lo for p, hi, lo in items]
    best = int(np.argmax(means))
    policies = {f"det_{k}": TabularPolicy.deterministic([k] * 3, K) for k in range(K)}
    policies["near_optimal"] = soften(policies[f"det_{best}"], exploration)
    policies["uniform"] = TabularPolicy.uniform(3, K)
    return TabularMdp(P, R, np.array([1.0, 0.0, 0.0]), frozenset({1, 2}), spec, "recommender", policies)


ENVIRONMENTS: dict[str, Callable[[], TabularMdp]] = {
    "counterexample": counterexample_mdp,
    "gridworld": gridworld,
    "recommender": recommender,
}


# ---------------------------------------------------------------------------
# policies


def soften(pi: TabularPolicy, epsilon: float) -> TabularPolicy:
    """(1 - epsilon) pi + epsilon uniform."""
    return TabularPolicy((1.0 - epsilon) * pi.probs + epsilon / pi.num_actions)


def mix_behavior(pi: TabularPolicy, alpha: float) -> TabularPolicy:
    """Behavior policy alpha * pi + (1 - alpha) * uniform."""
    if not (0.0 <= alpha <= 1.0):
        raise InvalidInput(f"alpha must lie in [0, 1], got {alpha}")
    return TabularPolicy(alpha * pi.probs + (1.0 - alpha) / pi.num_actions)


def value_iteration(mdp: TabularMdp, tol: float = 1e-12, max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Discounted optimal values and greedy actions (ties go to the lowest action id)."""
    P, R, g = mdp.transition, mdp.reward, mdp.spec.gamma
    term = mdp.terminal_mask()
    expected_r = np.einsum("sat,sat->sa", P, R)
    V = np.zeros(mdp.num_states)
    for _ in range(max_iter):
        Q = expected_r + g * P @ V
        V_new = np.where(term, 0.0, Q.max(axis=1))
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    Q = expected_r + g * P @ V
    return V, np.argmax(Q, axis=1)


# ---------------------------------------------------------------------------
# sampling


def _inverse_cdf(cum: np.ndarray, last: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = np.sum(cum <= u[:, None], axis=1)
    return np.minimum(idx, last)


def _last_positive(p: np.ndarray) -> np.ndarray:
    return p.shape[-1] - 1 - np.argmax((p > 0)[..., ::-1], axis=-1)


def sample_dataset(mdp: TabularMdp, beta: TabularPolicy, n: int, rng) -> Dataset:
    """Roll out ``n`` episodes of ``beta``, logging its action probabilities."""
    if n < 1:
        raise InvalidInput(f"n must be positive, got {n}")
    mdp.check_policy(beta)
    gen = as_generator(rng)
    T = mdp.spec.horizon
    term = mdp.terminal_mask()
    b_cum, b_last = np.cumsum(beta.probs, axis=1), _last_positive(beta.probs)
    p_cum, p_last = np.cumsum(mdp.transition, axis=2), _last_positive(mdp.transition)
    d_cum = np.cumsum(mdp.d0)[None, :]
    d_last = _last_positive(mdp.d0)

    states = np.full((n, T), PAD_STATE, dtype=np.int64)
    actions = np.full((n, T), PAD_ACTION, dtype=np.int64)
    b_probs = np.ones((n, T))
    rewards = np.zeros((n, T))
    lengths = np.zeros(n, dtype=np.int64)

    s = _inverse_cdf(np.repeat(d_cum, n, axis=0), np.full(n, d_last), gen.random(n))
    alive = ~term[s]
    for t in range(T):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        cur = s[idx]
        a = _inverse_cdf(b_cum[cur], b_last[cur], gen.random(idx.size))
        nxt = _inverse_cdf(p_cum[cur, a], p_last[cur, a], gen.random(idx.size))
        states[idx, t] = cur
        actions[idx, t] = a
        b_probs[idx, t] = beta.probs[cur, a]
        rewards[idx, t] = mdp.reward[cur, a, nxt]
        lengths[idx] += 1
        s[idx] = nxt
        alive[idx] = ~term[nxt]
    return Dataset(states, actions, b_probs, rewards, lengths, mdp.spec)


# ---------------------------------------------------------------------------
# oracles


@dataclass(frozen=True)
class OracleMoments:
    mu: float
    second: float
    variance: float

    def __iter__(self):
        return iter((self.mu, self.second, self.variance))


def moment_dp(mdp: TabularMdp, pi: TabularPolicy) -> OracleMoments:
    """Backward recursion for the first two moments of the return-to-go."""
    mdp.check_policy(pi)
    S, A = mdp.num_states, mdp.num_actions
    T = mdp.spec.horizon
    if S * A * S * T > MAX_DP_WORK:
        raise IntractableModel(f"moment recursion too large: {S} states, {A} actions, horizon {T}")
    P, R, g = mdp.transition, mdp.reward, mdp.spec.gamma
    live = ~mdp.terminal_mask()
    m1 = np.zeros(S)
    m2 = np.zeros(S)
    for _ in range(T):
        q1 = np.einsum("sat,sat->sa", P, R + g * m1[None, None, :])
        q2 = np.einsum("sat,sat->sa", P, R**2 + 2 * g * R * m1[None, None, :] + g**2 * m2[None, None, :])
        m1 = np.where(live, np.sum(pi.probs * q1, axis=1), 0.0)
        m2 = np.where(live, np.sum(pi.probs * q2, axis=1), 0.0)
    mu = float(mdp.d0 @ m1)
    second = float(mdp.d0 @ m2)
    return OracleMoments(mu, second, second - mu * mu)


def enumerate_trajectories(mdp: TabularMdp, policy: TabularPolicy,
                           limit: int = MAX_ENUMERATED) -> list[tuple[float, Trajectory]]:
    """Every trajectory ``policy`` can produce, with its probability.

    Recorded behavior probabilities are those of ``policy``.
    """
    mdp.check_policy(policy)
    T = mdp.spec.horizon
    term = mdp.terminal_mask()
    out: list[tuple[float, Trajectory]] = []

    def walk(s, t, prob, steps):
        if term[s] or t == T:
            out.append((prob, Trajectory(tuple(steps))))
            if len(out) > limit:
                raise IntractableModel(f"more than {limit} trajectories")
            return
        for a in np.flatnonzero(policy.probs[s] > 0):
            pa = policy.probs[s, a]
            for s2 in np.flatnonzero(mdp.transition[s, a] > 0):
                step = (int(s), int(a), float(pa), float(mdp.reward[s, a, s2]))
                walk(s2, t + 1, prob * pa * mdp.transition[s, a, s2], steps + [Step(*step)])

    for s0 in np.flatnonzero(mdp.d0 > 0):
        walk(int(s0), 0, float(mdp.d0[s0]), [])
    return out


def enumeration_moments(mdp: TabularMdp, pi: TabularPolicy) -> OracleMoments:
    mu = second = 0.0
    for prob, traj in enumerate_trajectories(mdp, pi):
        g = discounted_return(traj, mdp.spec)
        mu += prob * g
        second += prob * g * g
    return OracleMoments(mu, second, second - mu * mu)


def oracle_moments(mdp: TabularMdp, pi: TabularPolicy, *, cross_check: bool = True) -> OracleMoments:
    """Exact E_pi[G], E_pi[G^2] and Var_pi[G].

    Small models (at most 4 states and horizon 4) are also solved by full
    trajectory enumeration and the two answers must agree.
    """
    dp = moment_dp(mdp, pi)
    if cross_check and mdp.num_states <= 4 and mdp.spec.horizon <= 4:
        en = enumeration_moments(mdp, pi)
        if abs(en.mu - dp.mu) > 1e-9 or abs(en.second - dp.second) > 1e-9:
            raise OffVarError(f"oracle disagreement: recursion {dp}, enumeration {en}")
    return dp


# ---------------------------------------------------------------------------
# configs


def mdp_to_dict(mdp: TabularMdp) -> dict:
    P, R = mdp.transition, mdp.reward
    return {
        "name": mdp.name,
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        **mdp.spec.to_dict(),
        "start": mdp.d0.tolist(),
        "terminal": sorted(mdp.terminal),
        "transitions": [[int(s), int(a), int(t), float(P[s, a, t]), float(R[s, a, t])]
                        for s, a, t in zip(*np.nonzero(P))],
        "policies": {k: v.probs.tolist() for k, v in mdp.policies.items()},
    }


def mdp_from_dict(d: dict) -> TabularMdp:
    try:
        S, A = int(d["num_states"]), int(d["num_actions"])
        spec = ReturnSpec(float(d["gamma"]), int(d["horizon"]), float(d["r_min"]), float(d["r_max"]))
        P = np.zeros((S, A, S))
        R = np.zeros((S, A, S))
        for s, a, t, p, r in d["transitions"]:
            P[s, a, t] = p
            R[s, a, t] = r
        policies = {k: TabularPolicy(np.asarray(v, dtype=float)) for k, v in d.get("policies", {}).items()}
        return TabularMdp(P, R, np.asarray(d["start"], dtype=float), frozenset(d.get("terminal", ())),
                          spec, d.get("name", "custom"), policies)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        if isinstance(exc, InvalidInput):
            raise
        raise InvalidInput(f"malformed environment config: {exc!r}") from exc


def load_environment(name_or_path: str) -> TabularMdp:
    if name_or_path in ENVIRONMENTS:
        return ENVIRONMENTS[name_or_path]()
    path = Path(name_or_path)
    if not path.is_file():
        raise InvalidInput(f"unknown environment {name_or_path!r}; "
                           f"use one of {sorted(ENVIRONMENTS)} or a JSON config path")
    return mdp_from_dict(json.loads(path.read_text()))


def load_policy(mdp: TabularMdp, name_or_path: str) -> TabularPolicy:
    if name_or_path in mdp.policies:
        return mdp.policies[name_or_path]
    path = Path(name_or_path)
    if not path.is_file():
        return mdp.policy(name_or_path)
    pi = TabularPolicy.from_dict(json.loads(path.read_text()))
    mdp.check_policy(pi)
    return pi
