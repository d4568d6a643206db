"""Agent Q-networks, state-conditioned hypernetworks and the monotonic mixer.

Every network keeps its parameters as named :class:`~demar.grad.Node` leaves so
the same weights can be run either on the autodiff tape (``forward``) or as
plain numpy (``forward_np``) when no gradient is needed, e.g. for targets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np

from . import grad as G
from .grad import Node, ParamBlock
from .rng import init_stream

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class QmixElu:
    mixing_dim: int = 32
    alpha_elu: float = 1.0


@dataclass(frozen=True)
class Linear:
    pass


MixerKind = Union[QmixElu, Linear]


class Network:
    """A bag of named parameters; iteration order is sorted by id."""

    def __init__(self):
        self.tensors: dict[str, Node] = {}

    def _add(self, name: str, value: np.ndarray) -> Node:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter id {name!r}")
        node = G.param(value)
        self.tensors[name] = node
        return node

    def params(self) -> list[ParamBlock]:
        return [ParamBlock(k, self.tensors[k]) for k in sorted(self.tensors)]

    def nodes(self) -> list[Node]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def num_params(self) -> int:
        return sum(n.value.size for n in self.tensors.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: self.tensors[k].value.copy() for k in sorted(self.tensors)}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        mine, theirs = set(self.tensors), set(arrays)
        if mine != theirs:
            raise ValueError(f"parameter ids differ: missing {sorted(mine - theirs)}, "
                             f"unexpected {sorted(theirs - mine)}")
        bad = [f"{k}: {self.tensors[k].shape} vs {np.shape(arrays[k])}"
               for k in sorted(mine) if self.tensors[k].shape != np.shape(arrays[k])]
        if bad:
            raise ValueError("shape mismatch: " + "; ".join(bad))
        for k, v in arrays.items():
            self.tensors[k].value[...] = v

    def copy_from(self, other: "Network") -> None:
        for k, node in self.tensors.items():
            np.copyto(node.value, other.tensors[k].value)

    def zero_grad(self) -> None:
        for node in self.tensors.values():
            node.zero_grad()


class MLP:
    """Dense layers with ReLU between them (none after the last)."""

    def __init__(self, net: Network, prefix: str, sizes: list[int], rng: np.random.Generator,
                 zero_final: bool = False):
        self.layers = []
        for j, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=(fan_out,))
            if zero_final and j == len(sizes) - 2:
                w[...] = 0.0
                b[...] = 0.0
            self.layers.append((net._add(f"{prefix}.l{j}.W", w), net._add(f"{prefix}.l{j}.b", b)))

    def forward(self, x: Node) -> Node:
        for j, (w, b) in enumerate(self.layers):
            if j:
                x = G.relu(x)
            x = G.add(G.matmul(x, w), b)
        return x

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        for j, (w, b) in enumerate(self.layers):
            if j:
                x = np.maximum(x, 0.0)
            x = x @ w.value + b.value
        return x


class AgentNet(Network):
    """Observation -> one Q-value per action."""

    def __init__(self, obs_dim: int, n_actions: int, hidden: tuple[int, ...] = (64, 64),
                 rng: np.random.Generator | None = None, zero_final: bool = False):
        super().__init__()
        self.obs_dim, self.n_actions, self.hidden = obs_dim, n_actions, tuple(hidden)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.body = MLP(self, "q", [obs_dim, *hidden, n_actions], rng, zero_final=zero_final)

    def _check(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[-1] != self.obs_dim:
            raise G.ShapeError(f"agent_q: expected {self.obs_dim} observation features, got {obs.shape[-1]}")
        if not np.all(np.isfinite(obs)):
            raise ValueError("agent_q: non-finite observation")
        return obs

    def forward(self, obs: np.ndarray) -> Node:
        return self.body.forward(G.constant(self._check(obs)))

    def forward_np(self, obs: np.ndarray) -> np.ndarray:
        return self.body.forward_np(self._check(obs))


def agent_q(net: AgentNet, obs: np.ndarray) -> np.ndarray:
    return net.forward_np(obs)


@dataclass
class MixerParams:
    """Mixer weights for a batch of states.

    QMIX form: ``w1`` (B, N, L) and ``w2`` (B, L) non-negative, ``b1`` (B, L),
    ``b2`` (B,).  Linear form: ``w1`` (B, N) non-negative and ``b2`` (B,);
    ``b1``/``w2`` are None.  Entries are numpy arrays or tape nodes.
    """

    kind: MixerKind
    w1: Any
    b1: Any
    w2: Any
    b2: Any

    @classmethod
    def single(cls, kind: MixerKind, w1, b1=None, w2=None, b2=0.0) -> "MixerParams":
        """Build a batch-of-one parameter set from unbatched arrays."""
        lift = lambda x: None if x is None else np.asarray(x, dtype=np.float64)[None]
        return cls(kind, lift(w1), lift(b1), lift(w2), lift(b2))

    def nodes(self) -> "MixerParams":
        wrap = lambda x: x if x is None or isinstance(x, Node) else G.constant(x)
        return MixerParams(self.kind, wrap(self.w1), wrap(self.b1), wrap(self.w2), wrap(self.b2))

    def values(self) -> "MixerParams":
        get = lambda x: x.value if isinstance(x, Node) else x
        return MixerParams(self.kind, get(self.w1), get(self.b1), get(self.w2), get(self.b2))


class HyperNets(Network):
    """Global state -> mixer weights.

    QMIX form uses four heads: w1 and w2 with one hidden layer, b1 a single
    affine layer, b2 with one hidden layer of the mixing width.  The linear
    form uses a weight head and a bias head, both with one hidden layer.
    """

    def __init__(self, state_dim: int, n_agents: int, kind: MixerKind = QmixElu(),
                 hyper_hidden: int = 32, rng: np.random.Generator | None = None):
        super().__init__()
        self.state_dim, self.n_agents, self.kind, self.hyper_hidden = state_dim, n_agents, kind, hyper_hidden
        rng = rng if rng is not None else np.random.default_rng(0)
        S, N, H = state_dim, n_agents, hyper_hidden
        if isinstance(kind, QmixElu):
            L = kind.mixing_dim
            self.heads = {
                "b1": MLP(self, "b1", [S, L], rng),
                "b2": MLP(self, "b2", [S, L, 1], rng),
                "w1": MLP(self, "w1", [S, H, N * L], rng),
                "w2": MLP(self, "w2", [S, H, L], rng),
            }
        elif isinstance(kind, Linear):
            self.heads = {"b": MLP(self, "b", [S, H, 1], rng), "w": MLP(self, "w", [S, H, N], rng)}
        else:
            raise TypeError(f"unknown mixer kind {kind!r}")

    def forward(self, state: np.ndarray) -> MixerParams:
        s = G.constant(np.asarray(state, dtype=np.float64))
        B, N = s.shape[0], self.n_agents
        if isinstance(self.kind, QmixElu):
            L = self.kind.mixing_dim
            w1 = G.reshape(G.abs_(self.heads["w1"].forward(s)), (B, N, L))
            w2 = G.abs_(self.heads["w2"].forward(s))
            b1 = self.heads["b1"].forward(s)
            b2 = G.reshape(self.heads["b2"].forward(s), (B,))
            return MixerParams(self.kind, w1, b1, w2, b2)
        w = G.abs_(self.heads["w"].forward(s))
        b = G.reshape(self.heads["b"].forward(s), (B,))
        return MixerParams(self.kind, w, None, None, b)

    def forward_np(self, state: np.ndarray) -> MixerParams:
        s = np.asarray(state, dtype=np.float64)
        B, N = s.shape[0], self.n_agents
        if isinstance(self.kind, QmixElu):
            L = self.kind.mixing_dim
            w1 = np.abs(self.heads["w1"].forward_np(s)).reshape(B, N, L)
            w2 = np.abs(self.heads["w2"].forward_np(s))
            b1 = self.heads["b1"].forward_np(s)
            b2 = self.heads["b2"].forward_np(s).reshape(B)
            return MixerParams(self.kind, w1, b1, w2, b2)
        w = np.abs(self.heads["w"].forward_np(s))
        return MixerParams(self.kind, w, None, None, self.heads["b"].forward_np(s).reshape(B))


def hyper_forward(h: HyperNets, state: np.ndarray) -> MixerParams:
    return h.forward_np(state)


# --- mixing -------------------------------------------------------------------

def mix_forward(p: MixerParams, q: np.ndarray) -> np.ndarray:
    """Q_tot for individual values ``q`` of shape (B, N) or (B, J, N).

    The optional J axis evaluates several joint actions against the same
    per-state mixer.  Returns shape ``q.shape[:-1]``.
    """
    q = np.asarray(q, dtype=np.float64)
    if np.isnan(q).any():
        raise ValueError("mix_forward: NaN individual Q-value")
    B, N = q.shape[0], q.shape[-1]
    qj = q.reshape(B, -1, N)
    if isinstance(p.kind, Linear):
        out = (qj * p.w1[:, None, :]).sum(axis=-1) + p.b2[:, None]
    else:
        hidden = G.elu_value(np.matmul(qj, p.w1) + p.b1[:, None, :], p.kind.alpha_elu)
        out = np.matmul(hidden, p.w2[:, :, None])[..., 0] + p.b2[:, None]
    return out.reshape(q.shape[:-1])


def mix_forward_node(p: MixerParams, q: Node) -> Node:
    """Tape version of :func:`mix_forward` for q of shape (B, N)."""
    p = p.nodes()
    B, N = q.shape
    if isinstance(p.kind, Linear):
        return G.add(G.sum_(G.mul(q, p.w1), axis=1), p.b2)
    L = p.kind.mixing_dim
    pre = G.add(G.reshape(G.matmul(G.reshape(q, (B, 1, N)), p.w1), (B, L)), p.b1)
    hidden = G.elu(pre, p.kind.alpha_elu)
    return G.add(G.sum_(G.mul(hidden, p.w2), axis=1), p.b2)


def mixer_grad(p: MixerParams, q: np.ndarray) -> np.ndarray:
    """Closed-form dQ_tot/dQ_i, shape (B, N).

    Each hidden unit contributes ``w1[i,l] * w2[l]`` scaled by the ELU slope at
    its pre-activation: 1 on the non-negative side, ``alpha * exp(pre)`` below.
    """
    q = np.asarray(q, dtype=np.float64)
    if isinstance(p.kind, Linear):
        return np.broadcast_to(p.w1, q.shape).copy()
    pre = np.matmul(q[:, None, :], p.w1)[:, 0, :] + p.b1
    slope = G.elu_slope(pre, p.kind.alpha_elu)
    return np.einsum("bil,bl->bi", p.w1, p.w2 * slope)


def hypernet_l1(p: MixerParams) -> np.ndarray:
    """Per-state sum of |weights| + |biases| produced by the hypernetworks."""
    B = p.b2.shape[0]
    total = np.abs(p.w1).reshape(B, -1).sum(axis=1) + np.abs(p.b2)
    if isinstance(p.kind, QmixElu):
        total = total + np.abs(p.b1).sum(axis=1) + np.abs(p.w2).sum(axis=1)
    return total


def hypernet_l1_node(p: MixerParams) -> Node:
    p = p.nodes()
    B = p.b2.shape[0]
    total = G.add(G.sum_(G.reshape(G.abs_(p.w1), (B, -1)), axis=1), G.abs_(p.b2))
    if isinstance(p.kind, QmixElu):
        total = G.add(total, G.add(G.sum_(G.abs_(p.b1), axis=1), G.sum_(G.abs_(p.w2), axis=1)))
    return total


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path: str | Path, networks: Mapping[str, Network], meta: dict | None = None) -> None:
    """Write ``{network/param-id: array}`` plus a JSON metadata blob to ``.npz``."""
    arrays = {"__version__": np.array(CHECKPOINT_VERSION),
              "__meta__": np.array(json.dumps(meta or {}, sort_keys=True))}
    for prefix in sorted(networks):
        for k, v in networks[prefix].state_dict().items():
            arrays[f"{prefix}/{k}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path: str | Path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(str(data["__meta__"]))
        grouped: dict[str, dict[str, np.ndarray]] = {}
        for key in data.files:
            if key.startswith("__"):
                continue
            prefix, name = key.rsplit("/", 1)
            grouped.setdefault(prefix, {})[name] = data[key]
    return grouped, meta


def load_checkpoint(path: str | Path, networks: Mapping[str, Network]) -> dict:
    grouped, meta = read_checkpoint(path)
    if set(grouped) != set(networks):
        raise ValueError(f"checkpoint holds networks {sorted(grouped)}, expected {sorted(networks)}")
    for prefix, net in networks.items():
        try:
            net.load_state_dict(grouped[prefix])
        except ValueError as exc:
            raise ValueError(f"{prefix}: {exc}") from None
    return meta


def make_agent(obs_dim: int, n_actions: int, hidden, master_seed: int, net_id: str) -> AgentNet:
    return AgentNet(obs_dim, n_actions, hidden, rng=init_stream(master_seed, net_id))


def make_hypernets(state_dim: int, n_agents: int, kind: MixerKind, hyper_hidden: int,
                   master_seed: int, net_id: str) -> HyperNets:
    return HyperNets(state_dim, n_agents, kind, hyper_hidden, rng=init_stream(master_seed, net_id))
