"""Plain single-network QMIX, written without the ensemble machinery.

Used as the reference the degenerate ensemble configuration must reproduce
bit-for-bit.  Networks are seeded with the same stream names as member 0 of
the ensembles, and the optimizer sees parameters in the same order
(mixer first, then agents).
"""

from __future__ import annotations

import copy

import numpy as np

from . import grad as G
from .ensembles import Dims
from .learner import DivergenceError, Optimizer, StepMetrics
from .nets import make_agent, make_hypernets, mix_forward, mix_forward_node, mixer_grad
from .replay import Batch, ReplayBuffer


class QmixReference:
    def __init__(self, dims: Dims, gamma: float, target_period: int, optimizer: Optimizer, batch_size: int,
                 master_seed: int):
        self.dims, self.gamma, self.period = dims, gamma, target_period
        self.opt, self.batch_size = optimizer, batch_size
        self.agents = [make_agent(dims.obs_dim, dims.n_actions, dims.agent_hidden, master_seed, f"agent-{i}-0")
                       for i in range(dims.n_agents)]
        self.mixer = make_hypernets(dims.state_dim, dims.n_agents, dims.mixer, dims.hyper_hidden,
                                    master_seed, "mixer-0")
        self.target_agents = [copy.deepcopy(a) for a in self.agents]
        self.target_mixer = copy.deepcopy(self.mixer)
        self.step = 0

    def _target(self, batch: Batch) -> np.ndarray:
        best = np.stack([net.forward_np(batch.next_obs[:, i]).max(axis=-1)
                         for i, net in enumerate(self.target_agents)], axis=1)
        nxt = mix_forward(self.target_mixer.forward_np(batch.next_state), best)
        return np.where(batch.done, batch.reward, batch.reward + self.gamma * nxt)

    def train_step(self, buffer: ReplayBuffer) -> StepMetrics:
        return self.update(buffer.sample(self.batch_size))

    def update(self, batch: Batch) -> StepMetrics:
        y = self._target(batch)
        params = self.mixer.nodes() + [n for a in self.agents for n in a.nodes()]
        G.zero_grad(params)
        qs = G.stack([G.gather(net.forward(batch.obs[:, i]), batch.actions[:, i])
                      for i, net in enumerate(self.agents)], axis=1)
        mp = self.mixer.forward(batch.state)
        qtot = mix_forward_node(mp, qs)
        loss = G.mean(G.square(G.sub(qtot, G.constant(y))))
        if not np.isfinite(loss.value):
            raise DivergenceError(f"non-finite loss {float(loss.value)}")
        G.backward(loss)
        self.opt.step(params)
        self.step += 1
        if self.step % self.period == 0:
            for a, t in zip(self.agents, self.target_agents):
                t.copy_from(a)
            self.target_mixer.copy_from(self.mixer)
        return StepMetrics(float(loss.value), float(np.mean(y)), float(np.mean(qtot.value)),
                           float(np.mean(mixer_grad(mp.values(), qs.value))))

    def act(self, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
        out = np.empty(self.dims.n_agents, dtype=np.int64)
        for i, net in enumerate(self.agents):
            if rng.random() < epsilon:
                out[i] = rng.integers(self.dims.n_actions)
            else:
                out[i] = int(np.argmax(net.forward_np(obs[i][None])[0]))
        return out

    def estimate_qtot(self, state: np.ndarray, obs: np.ndarray) -> np.ndarray:
        q = np.stack([net.forward_np(obs[:, i]).max(axis=-1) for i, net in enumerate(self.agents)], axis=1)
        return mix_forward(self.mixer.forward_np(state), q)

    def networks(self):
        out = {f"agent-{i}-0": a for i, a in enumerate(self.agents)}
        out["mixer-0"] = self.mixer
        return out
