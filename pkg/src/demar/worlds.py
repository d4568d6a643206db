"""Small cooperative environments with sensor noise, plus exact ground truth for the tabular one.

Environments hold no randomness themselves.  A :class:`World` couples an
environment with two generators: one drives the dynamics, the other only the
sensor noise, so changing the noise never perturbs the internal trajectory.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import rng as R

MAX_VI_ENTRIES = 1_000_000


@dataclass(frozen=True)
class NoiseSpec:
    """Per-feature, per-step additive sensor noise: ``none``, ``uniform`` [lo, hi) or ``gaussian``."""

    kind: str = "none"
    lo: float = 0.0
    hi: float = 0.0
    mean: float = 0.0
    std: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "uniform", "gaussian"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "uniform" and not self.hi > self.lo:
            raise ValueError("uniform noise needs hi > lo")
        if self.kind == "gaussian" and self.std < 0:
            raise ValueError("gaussian noise needs std >= 0")

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "NoiseSpec":
        return cls("uniform", lo=lo, hi=hi)

    @classmethod
    def gaussian(cls, mean: float, std: float) -> "NoiseSpec":
        return cls("gaussian", mean=mean, std=std)

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            # rng.uniform is [lo, hi) up to rounding; guard the closed-open end explicitly
            x = self.lo + (self.hi - self.lo) * rng.random(shape)
            return np.minimum(x, np.nextafter(self.hi, self.lo))
        if self.kind == "gaussian":
            return rng.normal(self.mean, self.std, size=shape)
        return np.zeros(shape)

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "none":
            return x
        return x + self.sample(x.shape, rng)


class Env(Protocol):
    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    horizon: int

    def initial(self, rng: np.random.Generator): ...
    def transition(self, internal, actions: np.ndarray, rng: np.random.Generator) -> tuple[float, object, bool]: ...
    def observe(self, internal) -> tuple[np.ndarray, np.ndarray]: ...


# --- tabular game -----------------------------------------------------------------

@dataclass
class TabularGame:
    """Seeded random Markov game over one-hot states, small enough for exact value iteration.

    Rewards are mostly factored across agents (a per-agent table averaged over
    agents) with a small joint coupling term.  In every state each agent has one
    action worth 1; its other actions are worth at most ``1 - reward_gap``.
    Each step ends the episode with probability ``term_prob``; ``horizon``
    truncates without terminating.
    """

    n_states: int = 20
    n_agents: int = 3
    n_actions: int = 4
    gamma: float = 0.99
    seed: int = 0
    term_prob: float = 0.02
    horizon: int = 400
    coupling: float = 0.1
    concentration: float = 0.5
    reward_gap: float = 0.5
    trans: np.ndarray = field(init=False, repr=False)
    reward: np.ndarray = field(init=False, repr=False)
    start: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if min(self.n_states, self.n_agents, self.n_actions, self.horizon) < 1:
            raise ValueError("sizes must be positive")
        if not 0.0 <= self.term_prob <= 1.0:
            raise ValueError("term_prob must lie in [0, 1]")
        g = R.stream(self.seed, "tabular-game")
        S, J = self.n_states, self.n_joint
        if not 0.0 <= self.reward_gap <= 1.0:
            raise ValueError("reward_gap must lie in [0, 1]")
        local = (1.0 - self.reward_gap) * g.random((self.n_agents, S, self.n_actions))
        best = g.integers(0, self.n_actions, size=(self.n_agents, S))
        np.put_along_axis(local, best[..., None], 1.0, axis=-1)
        joint = all_joint(self.n_agents, self.n_actions)
        factored = np.mean([local[i][:, joint[:, i]] for i in range(self.n_agents)], axis=0)
        self.reward = factored + self.coupling * g.random((S, J))
        self.trans = g.dirichlet(np.full(S, self.concentration), size=(S, J))
        self.trans /= self.trans.sum(axis=-1, keepdims=True)
        self.start = np.full(S, 1.0 / S)

    @property
    def n_joint(self) -> int:
        return self.n_actions ** self.n_agents

    @property
    def obs_dim(self) -> int:
        return self.n_states

    @property
    def state_dim(self) -> int:
        return self.n_states

    def joint_index(self, actions: np.ndarray) -> int:
        idx = 0
        for a in actions:
            idx = idx * self.n_actions + int(a)
        return idx

    def initial(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.n_states, p=self.start))

    def transition(self, s: int, actions: np.ndarray, rng: np.random.Generator) -> tuple[float, int, bool]:
        j = self.joint_index(actions)
        terminated = bool(rng.random() < self.term_prob)
        nxt = int(rng.choice(self.n_states, p=self.trans[s, j]))
        return float(self.reward[s, j]), nxt, terminated

    def observe(self, s: int) -> tuple[np.ndarray, np.ndarray]:
        onehot = np.zeros(self.n_states)
        onehot[s] = 1.0
        return np.tile(onehot, (self.n_agents, 1)), onehot.copy()


def all_joint(n_agents: int, n_actions: int) -> np.ndarray:
    return np.array(list(itertools.product(range(n_actions), repeat=n_agents)), dtype=np.int64)


# --- grid pursuit -----------------------------------------------------------------

MOVES = np.array([(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)])  # stay, up, down, left, right


@dataclass(frozen=True)
class PursuitState:
    predators: tuple[tuple[int, int], ...]
    prey: tuple[int, int]


@dataclass
class GridPursuit:
    """Predators chase a scripted prey on a G x G grid; +10 on capture, -0.1 per step."""

    size: int = 5
    n_agents: int = 3
    capture_radius: int = 0
    horizon: int = 50
    gamma: float = 0.99
    n_actions: int = 5

    def __post_init__(self):
        if self.size < 2 or self.n_agents < 1 or self.capture_radius < 0:
            raise ValueError("invalid pursuit geometry")

    @property
    def obs_dim(self) -> int:
        return 4

    @property
    def state_dim(self) -> int:
        return 2 * (self.n_agents + 1)

    def initial(self, rng: np.random.Generator) -> PursuitState:
        cells = rng.choice(self.size * self.size, size=self.n_agents + 1, replace=False)
        pos = [(int(c) // self.size, int(c) % self.size) for c in cells]
        return PursuitState(tuple(pos[:-1]), pos[-1])

    def _move(self, p, a: int) -> tuple[int, int]:
        r, c = np.clip(np.asarray(p) + MOVES[a], 0, self.size - 1)
        return int(r), int(c)

    def _captured(self, preds, prey) -> bool:
        return any(abs(r - prey[0]) + abs(c - prey[1]) <= self.capture_radius for r, c in preds)

    def prey_move(self, preds, prey) -> tuple[int, int]:
        """Neighbouring cell maximising the distance to the nearest predator; ties go to the first move."""
        best, best_d = prey, -1
        for a in range(len(MOVES)):
            cell = self._move(prey, a)
            d = min(abs(r - cell[0]) + abs(c - cell[1]) for r, c in preds)
            if d > best_d:
                best, best_d = cell, d
        return best

    def transition(self, st: PursuitState, actions: np.ndarray, rng: np.random.Generator):
        preds = tuple(self._move(p, int(a)) for p, a in zip(st.predators, actions))
        if self._captured(preds, st.prey):
            return 9.9, PursuitState(preds, st.prey), True
        prey = self.prey_move(preds, st.prey)
        captured = self._captured(preds, prey)
        return (9.9 if captured else -0.1), PursuitState(preds, prey), captured

    def observe(self, st: PursuitState) -> tuple[np.ndarray, np.ndarray]:
        scale = 1.0 / (self.size - 1)
        obs = np.array([[r * scale, c * scale, (st.prey[0] - r) * scale, (st.prey[1] - c) * scale]
                        for r, c in st.predators])
        state = np.array([x * scale for p in (*st.predators, st.prey) for x in p], dtype=np.float64)
        return obs, state


# --- stepping ---------------------------------------------------------------------

@dataclass
class StepResult:
    reward: float
    obs: np.ndarray
    state: np.ndarray
    done: bool
    truncated: bool


class World:
    """An environment instance with its own dynamics and noise generators."""

    def __init__(self, env, noise: NoiseSpec, dyn_rng: np.random.Generator, noise_rng: np.random.Generator):
        self.env, self.noise = env, noise
        self.dyn_rng, self.noise_rng = dyn_rng, noise_rng
        self.internal = None
        self.t = 0
        self.finished = True

    def _emit(self) -> tuple[np.ndarray, np.ndarray]:
        obs, state = self.env.observe(self.internal)
        return self.noise.apply(obs, self.noise_rng), self.noise.apply(state, self.noise_rng)

    def reset(self) -> tuple[np.ndarray, np.ndarray]:
        self.internal = self.env.initial(self.dyn_rng)
        self.t = 0
        self.finished = False
        return self._emit()

    def step(self, actions) -> StepResult:
        if self.finished:
            raise RuntimeError("step after episode end; call reset()")
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.env.n_agents,) or actions.min() < 0 or actions.max() >= self.env.n_actions:
            raise ValueError(f"invalid joint action {actions.tolist()}")
        reward, self.internal, done = self.env.transition(self.internal, actions, self.dyn_rng)
        self.t += 1
        truncated = not done and self.t >= self.env.horizon
        self.finished = done or truncated
        obs, state = self._emit()
        return StepResult(reward, obs, state, done, truncated)


def env_step(world: World, actions) -> StepResult:
    return world.step(actions)


def make_world(env, noise: NoiseSpec, master_seed: int, index: int = 0) -> World:
    return World(env, noise, R.stream(master_seed, R.ENV_DYNAMICS, index), R.stream(master_seed, R.ENV_NOISE, index))


# --- ground truth -----------------------------------------------------------------

@dataclass
class OptimalQ:
    q: np.ndarray        # (S, J)
    v: np.ndarray        # (S,)
    residual: float
    iterations: int

    def start_value(self, start: np.ndarray) -> float:
        return float(start @ self.v)


def solve_optimal_q(game: TabularGame, tol: float = 1e-10, max_iter: int = 1_000_000) -> OptimalQ:
    """Value iteration over joint actions until the sup-norm Bellman residual is below ``tol``."""
    S, J = game.n_states, game.n_joint
    if S * J > MAX_VI_ENTRIES:
        raise ValueError(f"{S}x{J} table exceeds the value-iteration guard of {MAX_VI_ENTRIES} entries")
    disc = game.gamma * (1.0 - game.term_prob)
    v = np.zeros(S)
    for it in range(1, max_iter + 1):
        q = game.reward + disc * game.trans @ v
        new_v = q.max(axis=1)
        residual = float(np.max(np.abs(new_v - v)))
        v = new_v
        if residual < tol:
            q = game.reward + disc * game.trans @ v
            return OptimalQ(q, v, float(np.max(np.abs(q.max(axis=1) - v))), it)
    raise RuntimeError(f"value iteration did not reach tol {tol} in {max_iter} sweeps")


Policy = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class Visit:
    obs: np.ndarray
    state: np.ndarray
    actions: np.ndarray
    ret: float           # discounted return from this step on


def rollout_true_q(world: World, policy: Policy, gamma: float, episodes: int) -> tuple[list[Visit], list[float]]:
    """Run ``episodes`` episodes under a fixed policy.

    Returns every visited (obs, state, joint action) with its Monte-Carlo
    discounted return-to-go, and the discounted return of each episode.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    visits: list[Visit] = []
    returns: list[float] = []
    for _ in range(episodes):
        obs, state = world.reset()
        path, rewards = [], []
        while True:
            a = np.asarray(policy(obs, state), dtype=np.int64)
            res = world.step(a)
            path.append((obs, state, a))
            rewards.append(res.reward)
            obs, state = res.obs, res.state
            if res.done or res.truncated:
                break
        g = 0.0
        tail = []
        for r in reversed(rewards):
            g = r + gamma * g
            tail.append(g)
        tail.reverse()
        visits.extend(Visit(o, s, a, ret) for (o, s, a), ret in zip(path, tail))
        returns.append(tail[0])
    return visits, returns


def write_trajectory_csv(path: str | Path, visits: list[Visit]) -> None:
    """Debug export: one row per visited step."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "actions", "return", "state"])
        for t, v in enumerate(visits):
            w.writerow([t, " ".join(map(str, v.actions)), repr(v.ret), " ".join(repr(float(x)) for x in v.state)])
