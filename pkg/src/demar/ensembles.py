"""Dual ensembles: K agent networks per agent and H hypernet mixers, each with a target copy."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .nets import AgentNet, HyperNets, MixerKind, Network, QmixElu, make_agent, make_hypernets


@dataclass(frozen=True)
class EnsembleConfig:
    H: int = 1
    N_H: int = 1
    K: int = 1
    N_K: int = 1
    alpha_reg: float = 0.0
    gamma: float = 0.99
    lr: float = 5e-4
    target_period: int = 200

    def __post_init__(self):
        if not (1 <= self.N_H <= self.H):
            raise ValueError(f"need 1 <= N_H <= H, got N_H={self.N_H}, H={self.H}")
        if not (1 <= self.N_K <= self.K):
            raise ValueError(f"need 1 <= N_K <= K, got N_K={self.N_K}, K={self.K}")
        if self.alpha_reg < 0:
            raise ValueError("alpha_reg must be non-negative")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.target_period < 1:
            raise ValueError("target_period must be positive")

    @property
    def degenerate(self) -> bool:
        return self.H == self.N_H == self.K == self.N_K == 1 and self.alpha_reg == 0.0


@dataclass(frozen=True)
class Dims:
    n_agents: int
    obs_dim: int
    state_dim: int
    n_actions: int
    agent_hidden: tuple[int, ...] = (64, 64)
    hyper_hidden: int = 32
    mixer: MixerKind = QmixElu()


class DualEnsemble:
    """Online and target networks for Algorithm-1 style dual ensembles.

    ``agents[i][k]`` is the k-th online Q-network of agent i, ``mixers[h]``
    the h-th online hypernet stack.  ``*_targets`` mirror both.  Indices are
    zero-based throughout.
    """

    def __init__(self, config: EnsembleConfig, dims: Dims, master_seed: int):
        self.config, self.dims, self.master_seed = config, dims, master_seed
        self.agents: list[list[AgentNet]] = [
            [make_agent(dims.obs_dim, dims.n_actions, dims.agent_hidden, master_seed, f"agent-{i}-{k}")
             for k in range(config.K)]
            for i in range(dims.n_agents)
        ]
        self.mixers: list[HyperNets] = [
            make_hypernets(dims.state_dim, dims.n_agents, dims.mixer, dims.hyper_hidden, master_seed, f"mixer-{h}")
            for h in range(config.H)
        ]
        self.agent_targets = [[copy.deepcopy(net) for net in row] for row in self.agents]
        self.mixer_targets = [copy.deepcopy(m) for m in self.mixers]
        self.step = 0

    def named_online(self) -> dict[str, Network]:
        out: dict[str, Network] = {}
        for i, row in enumerate(self.agents):
            for k, net in enumerate(row):
                out[f"agent-{i}-{k}"] = net
        for h, m in enumerate(self.mixers):
            out[f"mixer-{h}"] = m
        return out

    def agent_params(self) -> list:
        return [node for row in self.agents for net in row for node in net.nodes()]

    def sync_targets(self) -> None:
        for row, trow in zip(self.agents, self.agent_targets):
            for net, tgt in zip(row, trow):
                tgt.copy_from(net)
        for m, tm in zip(self.mixers, self.mixer_targets):
            tm.copy_from(m)

    def max_target_gap(self) -> float:
        gap = 0.0
        pairs = [(n, t) for row, trow in zip(self.agents, self.agent_targets) for n, t in zip(row, trow)]
        pairs += list(zip(self.mixers, self.mixer_targets))
        for net, tgt in pairs:
            for k, node in net.tensors.items():
                gap = max(gap, float(np.max(np.abs(node.value - tgt.tensors[k].value))))
        return gap

    def online_mean_q(self, i: int, obs: np.ndarray) -> np.ndarray:
        """K-member mean of agent i's online Q-values (no tape)."""
        row = self.agents[i]
        total = row[0].forward_np(obs)
        for net in row[1:]:
            total = total + net.forward_np(obs)
        return total / len(row)


def init(config: EnsembleConfig, dims: Dims, master_seed: int) -> DualEnsemble:
    return DualEnsemble(config, dims, master_seed)


def sample_subsets(config: EnsembleConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw (K-subset, H-subset) uniformly without replacement, sorted, zero-based."""
    ks = np.sort(rng.choice(config.K, size=config.N_K, replace=False))
    hs = np.sort(rng.choice(config.H, size=config.N_H, replace=False))
    return ks, hs


def sync_targets(ens: DualEnsemble) -> None:
    ens.sync_targets()
