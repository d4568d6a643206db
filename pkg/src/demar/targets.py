"""Bootstrap-target operators: the dual-min target and the baseline remedies.

All functions are pure numpy: they read target networks and a batch and
return one target per batch element.  Terminal transitions always get ``r``.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .ensembles import DualEnsemble
from .nets import AgentNet, HyperNets, mix_forward
from .replay import Batch

MAX_JOINT_ACTIONS = 4096


@dataclass(frozen=True)
class Demar:
    pass


@dataclass(frozen=True)
class VanillaMax:
    pass


@dataclass(frozen=True)
class Td3Twin:
    pass


@dataclass(frozen=True)
class SubAvg:
    k_hist: int = 3

    def __post_init__(self):
        if self.k_hist < 1:
            raise ValueError("k_hist must be >= 1")


@dataclass(frozen=True)
class SoftmaxSubset:
    beta: float = 0.05

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass(frozen=True)
class SoftMellowmax:
    omega: float = 5.0
    alpha_sm: float = 0.1

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("omega must be positive")


@dataclass(frozen=True)
class WcuWeighted:
    w: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("w must lie in [0, 1]")


TargetSpec = Union[Demar, VanillaMax, Td3Twin, SubAvg, SoftmaxSubset, SoftMellowmax, WcuWeighted]


def bootstrap(reward: np.ndarray, done: np.ndarray, gamma: float, next_value: np.ndarray) -> np.ndarray:
    return np.where(done, reward, reward + gamma * next_value)


def _check(batch: Batch) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")


def _agent_values(nets: Sequence[AgentNet], obs: np.ndarray) -> np.ndarray:
    """(len(nets), B, m) Q-values of several nets on one agent's observations."""
    return np.stack([net.forward_np(obs) for net in nets])


def _per_agent_q(ens: DualEnsemble, batch: Batch, member: int = 0) -> np.ndarray:
    """(B, N, m) next-step target Q-values from one ensemble member per agent."""
    return np.stack([ens.agent_targets[i][member].forward_np(batch.next_obs[:, i])
                     for i in range(ens.dims.n_agents)], axis=1)


def demar_individual_targets(ens: DualEnsemble, batch: Batch, ks: Sequence[int]) -> np.ndarray:
    """(B, N): per agent, min over the K-subset for every action, then max over actions."""
    cols = []
    for i, row in enumerate(ens.agent_targets):
        q = _agent_values([row[k] for k in ks], batch.next_obs[:, i])
        cols.append(q.min(axis=0).max(axis=-1))
    return np.stack(cols, axis=1)


def demar_target(ens: DualEnsemble, batch: Batch, ks: Sequence[int], hs: Sequence[int], gamma: float) -> np.ndarray:
    _check(batch)
    qbar = demar_individual_targets(ens, batch, ks)
    mixed = np.stack([mix_forward(ens.mixer_targets[h].forward_np(batch.next_state), qbar) for h in hs])
    return bootstrap(batch.reward, batch.done, gamma, mixed.min(axis=0))


def vanilla_target(ens: DualEnsemble, batch: Batch, gamma: float) -> np.ndarray:
    _check(batch)
    qbar = _per_agent_q(ens, batch).max(axis=-1)
    p = ens.mixer_targets[0].forward_np(batch.next_state)
    return bootstrap(batch.reward, batch.done, gamma, mix_forward(p, qbar))


def td3_target(ens: DualEnsemble, batch: Batch, gamma: float) -> np.ndarray:
    if ens.config.H != 2:
        raise ValueError(f"twin-critic target needs H=2 mixers, got H={ens.config.H}")
    _check(batch)
    qbar = _per_agent_q(ens, batch).max(axis=-1)
    mixed = [mix_forward(m.forward_np(batch.next_state), qbar) for m in ens.mixer_targets]
    return bootstrap(batch.reward, batch.done, gamma, np.minimum(mixed[0], mixed[1]))


# --- joint-action helpers ---------------------------------------------------------

def all_joint_actions(n_agents: int, n_actions: int) -> np.ndarray:
    count = n_actions ** n_agents
    if count > MAX_JOINT_ACTIONS:
        raise ValueError(f"joint action space {count} exceeds enumeration guard {MAX_JOINT_ACTIONS}")
    return np.array(list(itertools.product(range(n_actions), repeat=n_agents)), dtype=np.int64)


def joint_q(q: np.ndarray, joint: np.ndarray) -> np.ndarray:
    """Individual values for joint actions: q (B, N, m), joint (J, N) or (B, J, N) -> (B, J, N)."""
    B, N, _ = q.shape
    if joint.ndim == 2:
        joint = np.broadcast_to(joint, (B, *joint.shape))
    return np.take_along_axis(q[:, None, :, :], joint[..., None], axis=-1)[..., 0]


def alternative_joint_actions(u_hat: Sequence[int], n_actions: int) -> list[tuple[int, ...]]:
    """Joint actions reachable from ``u_hat`` by changing one agent's action, ``u_hat`` once."""
    out, seen = [], set()
    for i in range(len(u_hat)):
        for u in range(n_actions):
            joint = tuple(u if j == i else a for j, a in enumerate(u_hat))
            if joint not in seen:
                seen.add(joint)
                out.append(joint)
    return out


def _alternative_joint_batch(u_hat: np.ndarray, n_actions: int) -> np.ndarray:
    """Vectorised :func:`alternative_joint_actions`: (B, N) -> (B, 1 + N(m-1), N), same order."""
    B, N = u_hat.shape
    rows = np.repeat(u_hat[:, None, :], N * n_actions, axis=1)
    agent = np.repeat(np.arange(N), n_actions)
    action = np.tile(np.arange(n_actions), N)
    rows[:, np.arange(N * n_actions), agent] = action
    duplicate = (action[None, :] == u_hat[:, agent]) & (agent[None, :] > 0)
    return rows[~duplicate].reshape(B, N * n_actions - (N - 1), N)


# --- baseline operators -----------------------------------------------------------

def subavg_combine(values: np.ndarray) -> np.ndarray:
    """Average the snapshot values (axis 0) that lie strictly below their mean.

    Falls back to the plain mean where no value is below it (all equal).
    """
    values = np.asarray(values, dtype=np.float64)
    avg = values.mean(axis=0)
    keep = (avg[None] - values) > 0
    count = keep.sum(axis=0)
    kept = np.where(keep, values, 0.0).sum(axis=0)
    return np.where(count > 0, kept / np.maximum(count, 1), avg)


@dataclass
class Snapshot:
    agents: list[AgentNet]
    mixer: HyperNets


class SubAvgHistory:
    """Ring of the last ``k_hist`` target (agent, mixer) parameter sets."""

    def __init__(self, k_hist: int):
        self.k_hist = k_hist
        self.snapshots: list[Snapshot] = []

    def __len__(self) -> int:
        return len(self.snapshots)

    def push(self, ens: DualEnsemble) -> None:
        snap = Snapshot([copy.deepcopy(row[0]) for row in ens.agent_targets], copy.deepcopy(ens.mixer_targets[0]))
        self.snapshots.append(snap)
        if len(self.snapshots) > self.k_hist:
            self.snapshots.pop(0)


def subavg_target(history: SubAvgHistory, batch: Batch, gamma: float) -> np.ndarray:
    if len(history) == 0:
        raise ValueError("Sub-Avg history is empty")
    _check(batch)
    first = history.snapshots[0]
    joint = all_joint_actions(len(first.agents), first.agents[0].n_actions)
    per_snapshot = []
    for snap in history.snapshots:
        q = np.stack([net.forward_np(batch.next_obs[:, i]) for i, net in enumerate(snap.agents)], axis=1)
        per_snapshot.append(mix_forward(snap.mixer.forward_np(batch.next_state), joint_q(q, joint)))
    best = subavg_combine(np.stack(per_snapshot)).max(axis=-1)
    return bootstrap(batch.reward, batch.done, gamma, best)


def softmax_weighted(values: np.ndarray, beta: float) -> np.ndarray:
    """sum_j softmax(beta * v)_j * v_j along the last axis."""
    z = beta * (values - values.max(axis=-1, keepdims=True))
    w = np.exp(z)
    return (w * values).sum(axis=-1) / w.sum(axis=-1)


def softmax_subset_target(ens: DualEnsemble, batch: Batch, gamma: float, beta: float) -> np.ndarray:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    _check(batch)
    q = _per_agent_q(ens, batch)
    u_hat = q.argmax(axis=-1)
    joint = _alternative_joint_batch(u_hat, q.shape[-1])
    p = ens.mixer_targets[0].forward_np(batch.next_state)
    return bootstrap(batch.reward, batch.done, gamma, softmax_weighted(mix_forward(p, joint_q(q, joint)), beta))


def soft_mellowmax(q: np.ndarray, omega: float, alpha_sm: float) -> np.ndarray:
    """(1/omega) log sum_a softmax(alpha_sm q)_a exp(omega q_a), along the last axis."""
    if not omega > 0:
        raise ValueError("omega must be positive")
    q = np.asarray(q, dtype=np.float64)
    log_w = alpha_sm * q
    log_w = log_w - _logsumexp(log_w)[..., None]
    out = _logsumexp(log_w + omega * q) / omega
    # a weighted power mean stays within the value range; clip rounding at the ends
    return np.clip(out, q.min(axis=-1), q.max(axis=-1))


def _logsumexp(x: np.ndarray) -> np.ndarray:
    top = x.max(axis=-1, keepdims=True)
    return np.log(np.exp(x - top).sum(axis=-1)) + top[..., 0]


def soft_mellowmax_target(ens: DualEnsemble, batch: Batch, gamma: float, omega: float, alpha_sm: float) -> np.ndarray:
    _check(batch)
    qbar = soft_mellowmax(_per_agent_q(ens, batch), omega, alpha_sm)
    p = ens.mixer_targets[0].forward_np(batch.next_state)
    return bootstrap(batch.reward, batch.done, gamma, mix_forward(p, qbar))


def wcu_mix_prediction(q_h, q_p, w: float):
    """w * Q_h + (1 - w) * Q_p; works for arrays and tape nodes alike."""
    if not 0.0 <= w <= 1.0:
        raise ValueError("w must lie in [0, 1]")
    return q_h * w + q_p * (1.0 - w)


def compute_targets(spec: TargetSpec, ens: DualEnsemble, batch: Batch, ks, hs, gamma: float,
                    history: SubAvgHistory | None = None) -> np.ndarray:
    if isinstance(spec, Demar):
        return demar_target(ens, batch, ks, hs, gamma)
    if isinstance(spec, VanillaMax):
        return vanilla_target(ens, batch, gamma)
    if isinstance(spec, (Td3Twin, WcuWeighted)):
        return td3_target(ens, batch, gamma)
    if isinstance(spec, SubAvg):
        return subavg_target(history, batch, gamma)
    if isinstance(spec, SoftmaxSubset):
        return softmax_subset_target(ens, batch, gamma, spec.beta)
    if isinstance(spec, SoftMellowmax):
        return soft_mellowmax_target(ens, batch, gamma, spec.omega, spec.alpha_sm)
    raise TypeError(f"unknown target spec {spec!r}")
