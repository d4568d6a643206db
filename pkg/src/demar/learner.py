"""The estimation-optimization loop: targets, DEMAR loss, per-critic updates, target sync."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import grad as G
from . import targets as T
from .ensembles import DualEnsemble, sample_subsets
from .grad import Node
from .nets import MixerParams, hypernet_l1_node, mix_forward, mix_forward_node, mixer_grad
from .replay import Batch, ReplayBuffer


class DivergenceError(FloatingPointError):
    """Raised when the training loss stops being finite."""


@dataclass
class StepMetrics:
    loss: float
    mean_target: float
    mean_qtot: float
    mean_mixer_grad: float


class Optimizer:
    """Plain SGD or RMSprop (torch semantics) with optional global-norm clipping."""

    def __init__(self, kind: str = "rmsprop", lr: float = 5e-4, alpha: float = 0.99, eps: float = 1e-5,
                 clip: float | None = 10.0):
        if kind not in ("rmsprop", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind, self.lr, self.alpha, self.eps, self.clip = kind, lr, alpha, eps, clip
        self.square_avg: dict[int, np.ndarray] = {}

    def clip_grads(self, nodes: Sequence[Node]) -> float:
        """Scale gradients in place so their global norm is at most ``clip``; returns the pre-clip norm."""
        norm = float(np.sqrt(sum(float(np.sum(n.grad * n.grad)) for n in nodes)))
        if self.clip is not None and norm > self.clip:
            coef = self.clip / (norm + 1e-6)
            for n in nodes:
                n.grad *= coef
        return norm

    def step(self, nodes: Sequence[Node]) -> float:
        norm = self.clip_grads(nodes)
        if self.lr == 0.0:
            return norm
        for n in nodes:
            if self.kind == "sgd":
                n.value -= self.lr * n.grad
                continue
            v = self.square_avg.get(id(n))
            if v is None:
                v = self.square_avg[id(n)] = np.zeros_like(n.value)
            v *= self.alpha
            v += (1.0 - self.alpha) * n.grad * n.grad
            n.value -= self.lr * n.grad / (np.sqrt(v) + self.eps)
        return norm


class LinearSchedule:
    def __init__(self, start: float = 1.0, end: float = 0.05, steps: int = 10_000):
        self.start, self.end, self.steps = start, end, max(int(steps), 1)

    def __call__(self, t: int) -> float:
        frac = min(max(t, 0) / self.steps, 1.0)
        return self.start + frac * (self.end - self.start)


def chosen_q_node(ens: DualEnsemble, i: int, obs: np.ndarray, actions: np.ndarray) -> Node:
    """Mean over all K online members of agent i's Q-value for the taken actions."""
    picks = [G.gather(net.forward(obs), actions) for net in ens.agents[i]]
    if len(picks) == 1:
        return picks[0]
    return G.mean(G.stack(picks, axis=0), axis=0)


def online_qtot(ens: DualEnsemble, h: int, batch: Batch) -> tuple[Node, MixerParams, Node]:
    """(Q_tot prediction (B,), mixer params, individual Q-values (B, N)) on the tape."""
    qs = G.stack([chosen_q_node(ens, i, batch.obs[:, i], batch.actions[:, i])
                  for i in range(ens.dims.n_agents)], axis=1)
    params = ens.mixers[h].forward(batch.state)
    return mix_forward_node(params, qs), params, qs


def demar_loss(prediction: Node, y_tot: np.ndarray, params: MixerParams, alpha_reg: float) -> Node:
    """Batch mean of squared TD error plus alpha_reg times the batch-mean hypernet L1."""
    td = G.sub(prediction, G.constant(np.asarray(y_tot, dtype=np.float64)))
    loss = G.mean(G.square(td))
    if alpha_reg > 0.0:
        loss = G.add(loss, G.scale(G.mean(hypernet_l1_node(params)), alpha_reg))
    if not np.isfinite(loss.value):
        raise DivergenceError(f"non-finite loss {float(loss.value)}; max |Q_tot|="
                              f"{float(np.max(np.abs(prediction.value)))}, max |y|={float(np.max(np.abs(y_tot)))}")
    return loss


def act_epsilon_greedy(ens: DualEnsemble, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Per agent: uniform random action with probability epsilon, else argmax of the K-member mean."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    m = ens.dims.n_actions
    out = np.empty(ens.dims.n_agents, dtype=np.int64)
    for i in range(ens.dims.n_agents):
        if rng.random() < epsilon:
            out[i] = rng.integers(m)
        else:
            out[i] = int(np.argmax(ens.online_mean_q(i, obs[i][None])[0]))
    return out


def greedy_qtot(ens: DualEnsemble, state: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Online estimate of max Q_tot for a batch of (state, obs): mean over the H mixers."""
    q = np.stack([ens.online_mean_q(i, obs[:, i]).max(axis=-1) for i in range(ens.dims.n_agents)], axis=1)
    vals = [mix_forward(m.forward_np(state), q) for m in ens.mixers]
    return vals[0] if len(vals) == 1 else np.mean(vals, axis=0)


class Learner:
    """Algorithm-1 learner around a :class:`DualEnsemble` and a target operator."""

    def __init__(self, ens: DualEnsemble, spec: T.TargetSpec, optimizer: Optimizer, batch_size: int,
                 subset_rng: np.random.Generator):
        cfg = ens.config
        if isinstance(spec, (T.Td3Twin, T.WcuWeighted)) and cfg.H != 2:
            raise ValueError(f"{type(spec).__name__} needs H=2, got H={cfg.H}")
        self.ens, self.spec, self.opt, self.batch_size = ens, spec, optimizer, batch_size
        self.subset_rng = subset_rng
        self.history = None
        if isinstance(spec, T.SubAvg):
            self.history = T.SubAvgHistory(spec.k_hist)
            self.history.push(ens)

    def targets(self, batch: Batch) -> np.ndarray:
        ks, hs = sample_subsets(self.ens.config, self.subset_rng)
        return T.compute_targets(self.spec, self.ens, batch, ks, hs, self.ens.config.gamma, self.history)

    def train_step(self, buffer: ReplayBuffer) -> StepMetrics:
        return self.update(buffer.sample(self.batch_size))

    def update(self, batch: Batch) -> StepMetrics:
        ens, cfg = self.ens, self.ens.config
        y = self.targets(batch)
        agent_nodes = ens.agent_params()
        losses, preds, grads = [], [], []
        for h in range(cfg.H):
            params_h = ens.mixers[h].nodes() + agent_nodes
            for m in ens.mixers:
                m.zero_grad()
            G.zero_grad(agent_nodes)
            qtot, mp, qs = online_qtot(ens, h, batch)
            prediction = qtot
            if isinstance(self.spec, T.WcuWeighted):
                partner, _, _ = online_qtot(ens, 1 - h, batch)
                prediction = T.wcu_mix_prediction(qtot, partner, self.spec.w)
            loss = demar_loss(prediction, y, mp, cfg.alpha_reg)
            G.backward(loss)
            self.opt.step(params_h)
            losses.append(float(loss.value))
            preds.append(float(np.mean(prediction.value)))
            grads.append(float(np.mean(mixer_grad(mp.values(), qs.value))))
        ens.step += 1
        if ens.step % cfg.target_period == 0:
            ens.sync_targets()
            if self.history is not None:
                self.history.push(ens)
        return StepMetrics(float(np.mean(losses)), float(np.mean(y)), float(np.mean(preds)), float(np.mean(grads)))

    # uniform interface shared with the reference QMIX learner
    def act(self, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
        return act_epsilon_greedy(self.ens, obs, epsilon, rng)

    def estimate_qtot(self, state: np.ndarray, obs: np.ndarray) -> np.ndarray:
        return greedy_qtot(self.ens, state, obs)

    def networks(self):
        return self.ens.named_online()
