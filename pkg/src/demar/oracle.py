"""Independent checks of the overestimation analysis plus live training diagnostics.

Monte-Carlo estimates are split into a fixed number of shards.  Each shard
owns its own random stream and the partial sums are reduced in shard order,
so the result does not depend on how many threads ran the shards.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import grad as G
from . import rng as R
from .learner import Optimizer
from .nets import Linear, MixerParams, QmixElu, mix_forward, mix_forward_node, mixer_grad

Z99 = 2.5758293035489004  # two-sided 99% normal quantile
N_SHARDS = 16
MIN_SAMPLES = 10_000


@dataclass
class BiasReport:
    measured: float
    predicted_lo: float
    predicted_hi: float
    ci_halfwidth: float
    samples: int

    @property
    def passed(self) -> bool:
        return self.measured - self.ci_halfwidth <= self.predicted_hi and \
            self.measured + self.ci_halfwidth >= self.predicted_lo

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"


def eq5_prediction(m: int, eps: float, gamma: float) -> float:
    return gamma * eps * (m - 1) / (m + 1)


# --- sharded Monte-Carlo ----------------------------------------------------------

@dataclass
class _Moments:
    n: int
    total: float
    total_sq: float
    lo: float = np.inf
    hi: float = -np.inf


def _run_shards(kernel: Callable[[np.random.Generator, int], tuple], samples: int, seed: int,
                threads: int) -> list:
    sizes = [samples // N_SHARDS + (1 if s < samples % N_SHARDS else 0) for s in range(N_SHARDS)]
    jobs = [(R.shard_stream(seed, s), n) for s, n in enumerate(sizes)]
    if threads <= 1:
        return [kernel(g, n) for g, n in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: kernel(*job), jobs))


def _reduce(parts: Sequence[_Moments]) -> _Moments:
    acc = _Moments(0, 0.0, 0.0)
    for p in parts:  # fixed shard order
        acc.n += p.n
        acc.total += p.total
        acc.total_sq += p.total_sq
        acc.lo, acc.hi = min(acc.lo, p.lo), max(acc.hi, p.hi)
    return acc


def _moments(x: np.ndarray) -> _Moments:
    return _Moments(x.size, float(np.sum(x)), float(np.sum(x * x)))


def _report(acc: _Moments, lo: float, hi: float) -> BiasReport:
    mean = acc.total / acc.n
    var = max(acc.total_sq / acc.n - mean * mean, 0.0) * acc.n / max(acc.n - 1, 1)
    return BiasReport(mean, lo, hi, Z99 * np.sqrt(var / acc.n), acc.n)


def _check_samples(samples: int) -> None:
    if samples < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples for a usable confidence interval, got {samples}")


def _max_noise(g: np.random.Generator, n: int, shape: tuple, eps: float) -> np.ndarray:
    """max over the last axis of U[-eps, eps] noise, for ``n`` draws of ``shape``."""
    if shape[-1] == 1:
        # a lone action: the max is the noise itself, whose mean is exactly zero; keep it exact
        return np.zeros((n, *shape[:-1]))
    return (g.random((n, *shape)) * 2.0 - 1.0).max(axis=-1) * eps


def single_agent_bias_mc(m: int, eps: float, gamma: float, samples: int = 1_000_000, seed: int = 0,
                         threads: int = 1) -> BiasReport:
    """Target overestimation of one agent whose true action values are all equal."""
    _check_samples(samples)
    if m < 1 or eps < 0:
        raise ValueError("need m >= 1 and eps >= 0")

    def kernel(g, n):
        return _moments(gamma * _max_noise(g, n, (m,), eps))

    pred = eq5_prediction(m, eps, gamma)
    return _report(_reduce(_run_shards(kernel, samples, seed, threads)), pred, pred)


def lemma1_bias_mc(w: float, n_agents: int, m: int, eps: float, gamma: float, samples: int = 1_000_000,
                   seed: int = 0, threads: int = 1) -> BiasReport:
    """Joint target overestimation through a fixed linear mixer with every weight equal to ``w``."""
    _check_samples(samples)
    if w < 0:
        raise ValueError("mixer weights must be non-negative")
    weights = np.full(n_agents, float(w))

    def kernel(g, n):
        z = _max_noise(g, n, (n_agents, m), eps)
        return _moments(gamma * (z @ weights))

    pred = gamma * n_agents * w * eq5_prediction(m, eps, 1.0)
    return _report(_reduce(_run_shards(kernel, samples, seed, threads)), pred, pred)


def lemma1_bias_mc_elu(params: MixerParams, q_star: np.ndarray, m: int, eps: float, gamma: float,
                       samples: int = 200_000, seed: int = 0, threads: int = 1) -> BiasReport:
    """Same check through a fixed monotone ELU mixer.

    The gradient bounds l and L are the smallest and largest mixer gradient
    seen along the segments from Q* to the noisy maxima.
    """
    _check_samples(samples)
    if not isinstance(params.kind, QmixElu):
        raise ValueError("expected QmixElu mixer parameters")
    q_star = np.asarray(q_star, dtype=np.float64)
    n_agents = q_star.size
    base = float(mix_forward(params, q_star[None])[0])

    def kernel(g, n):
        z = _max_noise(g, n, (n_agents, m), eps)
        pts = q_star[None] + z
        bias = gamma * (mix_forward(params, pts) - base)
        lo, hi = np.inf, -np.inf
        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            grads = mixer_grad(params, q_star[None] + t * z)
            lo, hi = min(lo, float(grads.min())), max(hi, float(grads.max()))
        mom = _moments(bias)
        mom.lo, mom.hi = lo, hi
        return mom

    acc = _reduce(_run_shards(kernel, samples, seed, threads))
    ez = eq5_prediction(m, eps, 1.0)
    return _report(acc, gamma * n_agents * acc.lo * ez, gamma * n_agents * acc.hi * ez)


# --- one-step propagation ---------------------------------------------------------

@dataclass
class OneStepReport:
    delta_q: np.ndarray
    delta_qtot: float
    predicted_q: np.ndarray
    predicted_qtot: float
    lower_bound: float
    error: float

    @property
    def passed(self) -> bool:
        return self.error < 1e-10


def _one_sgd_step(params: MixerParams, q0: np.ndarray, dy: float, alpha: float) -> np.ndarray:
    """Fit tabular Q_i (one scalar each) to y = Q_tot(q0) + dy with one plain SGD step; returns new q."""
    q = G.param(np.asarray(q0, dtype=np.float64)[None])
    y = float(mix_forward(params, q.value)[0]) + dy
    loss = G.mean(G.square(G.sub(mix_forward_node(params, q), G.constant([y]))))
    G.backward(loss)
    Optimizer("sgd", lr=alpha, clip=None).step([q])
    return q.value[0].copy()


def theorem1_onestep(w: Sequence[float], dy: float, alpha: float, q_star: Sequence[float] | None = None) -> OneStepReport:
    """Bias ``dy`` in the joint target moves each Q_i by 2*alpha*dy*w_i and Q_tot by 2*alpha*dy*sum w^2."""
    if isinstance(w, MixerParams):
        raise ValueError("theorem1_onestep takes linear weights only; use theorem1_onestep_elu for ELU mixers")
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or np.any(w < 0):
        raise ValueError("weights must be a non-negative vector")
    q0 = np.ones_like(w) if q_star is None else np.asarray(q_star, dtype=np.float64)
    params = MixerParams.single(Linear(), w, b2=0.0)
    q1 = _one_sgd_step(params, q0, dy, alpha)
    dq = q1 - q0
    dqtot = float(mix_forward(params, q1[None])[0] - mix_forward(params, q0[None])[0])
    pred_q = 2 * alpha * dy * w
    pred_tot = 2 * alpha * dy * float(w @ w)
    err = max(float(np.max(np.abs(dq - pred_q))), abs(dqtot - pred_tot))
    return OneStepReport(dq, dqtot, pred_q, pred_tot, 2 * alpha * w.size * float(w.min()) ** 2 * dy, err)


@dataclass
class EluStepReport:
    measured: float
    predicted: float
    residual: float


def theorem1_onestep_elu(params: MixerParams, q0: Sequence[float], dy: float, alpha: float) -> EluStepReport:
    """First-order prediction 2*alpha*dy*sum(g_i^2) against the true change of an ELU mixer's output."""
    q0 = np.asarray(q0, dtype=np.float64)
    g = mixer_grad(params, q0[None])[0]
    q1 = _one_sgd_step(params, q0, dy, alpha)
    measured = float(mix_forward(params, q1[None])[0] - mix_forward(params, q0[None])[0])
    predicted = 2 * alpha * dy * float(g @ g)
    return EluStepReport(measured, predicted, abs(measured - predicted))


def elu_order_ratio(params: MixerParams, q0, dy: float, alpha: float) -> float:
    """Residual at alpha over residual at alpha/2; about 4 for a second-order remainder."""
    big = theorem1_onestep_elu(params, q0, dy, alpha).residual
    small = theorem1_onestep_elu(params, q0, dy, alpha / 2).residual
    return big / small if small > 0 else float("inf")


def demo_elu_mixer(seed: int = 0) -> tuple[MixerParams, np.ndarray]:
    """A fixed three-agent ELU mixer whose hidden units sit on both sides of zero, away from the kink."""
    w1 = np.array([[0.8, 0.3, 0.5, 0.2], [0.4, 0.9, 0.1, 0.6], [0.3, 0.2, 0.7, 0.5]])
    b1 = np.array([-2.0, 0.7, -1.1, 0.4])
    w2 = np.array([0.6, 1.2, 0.9, 0.5])
    return MixerParams.single(QmixElu(4), w1, b1, w2, 0.3), np.array([0.5, 0.8, 0.4])


# --- training diagnostics ---------------------------------------------------------

@dataclass
class GradStats:
    mean: float
    max: float
    min: float


def probe_mixer_grad(ens, batch) -> GradStats:
    """dQ_tot/dQ_i over a batch, all agents and all online mixers, at the online Q_i of the taken actions."""
    q = np.stack([np.take_along_axis(ens.online_mean_q(i, batch.obs[:, i]), batch.actions[:, i, None], axis=1)[:, 0]
                  for i in range(ens.dims.n_agents)], axis=1)
    grads = np.stack([mixer_grad(m.forward_np(batch.state), q) for m in ens.mixers])
    return GradStats(float(grads.mean()), float(grads.max()), float(grads.min()))


@dataclass
class GapReport:
    est: float
    true: float
    ratio: float        # nan when the true value is too close to zero
    gap: float
    returns: list


def estimation_gap(learner, world, gamma: float, episodes: int, floor: float = 1e-8) -> GapReport:
    """Greedy rollouts: network Q_tot on visited steps against their Monte-Carlo discounted return."""
    from .worlds import rollout_true_q

    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    unused = np.random.default_rng(0)  # epsilon 0 never draws
    visits, returns = rollout_true_q(world, lambda o, s: learner.act(o, 0.0, unused), gamma, episodes)
    est = float(np.mean(learner.estimate_qtot(np.stack([v.state for v in visits]), np.stack([v.obs for v in visits]))))
    true = float(np.mean([v.ret for v in visits]))
    if not np.isfinite(est):
        ratio = float("inf")
    elif abs(true) < floor:
        ratio = float("nan")
    else:
        ratio = est / true
    return GapReport(est, true, ratio, est - true, returns)


# --- finite-difference registry ---------------------------------------------------

def _gradcheck_cases():
    g = np.random.default_rng(7)

    def p(*shape, low=-1.0, high=1.0):
        return G.param(g.uniform(low, high, size=shape))

    a, b = p(3, 4), p(3, 4)
    bb = p(4)
    m1, m2 = p(2, 3, 4), p(2, 4, 5)
    pos = p(3, 4, low=0.2, high=1.0)
    neg = p(3, 4, low=-1.0, high=-0.2)
    idx = np.array([0, 2, 1])
    w = G.constant(g.uniform(0.5, 1.5, size=4))
    cases = {
        "add": (lambda: G.sum_(G.add(a, bb)), [a, bb]),
        "sub": (lambda: G.sum_(G.sub(a, b)), [a, b]),
        "mul": (lambda: G.sum_(G.mul(a, b)), [a, b]),
        "scale": (lambda: G.sum_(G.scale(a, -2.5)), [a]),
        "square": (lambda: G.sum_(G.square(a)), [a]),
        "abs": (lambda: G.sum_(G.mul(G.add(G.abs_(pos), G.abs_(neg)), w)), [pos, neg]),
        "relu": (lambda: G.sum_(G.mul(G.relu(pos), w)), [pos]),
        "elu": (lambda: G.sum_(G.mul(G.add(G.elu(neg), G.elu(pos)), w)), [pos, neg]),
        "matmul": (lambda: G.sum_(G.square(G.matmul(m1, m2))), [m1, m2]),
        "reshape": (lambda: G.sum_(G.mul(G.reshape(a, (4, 3)), G.constant(np.arange(12.0).reshape(4, 3)))), [a]),
        "concat": (lambda: G.sum_(G.square(G.concat([a, b], axis=0))), [a, b]),
        "stack": (lambda: G.sum_(G.square(G.stack([a, b], axis=1))), [a, b]),
        "gather": (lambda: G.sum_(G.square(G.gather(G.reshape(a, (3, 4)), idx))), [a]),
        "sum": (lambda: G.sum_(G.square(G.sum_(a, axis=0))), [a]),
        "mean": (lambda: G.sum_(G.square(G.mean(a, axis=1))), [a]),
        "min": (lambda: G.sum_(G.square(G.min_(a, axis=1))), [a]),
        "max": (lambda: G.sum_(G.square(G.max_(a, axis=0))), [a]),
    }
    return cases


def _loss_case():
    from . import ensembles as E
    from .learner import demar_loss, online_qtot
    from .replay import Batch

    g = np.random.default_rng(11)
    dims = E.Dims(2, 4, 5, 3, (8,), 6, QmixElu(4))
    ens = E.init(E.EnsembleConfig(H=2, N_H=1, K=2, N_K=1, alpha_reg=0.1), dims, 3)
    B = 6
    batch = Batch(g.normal(size=(B, 5)), g.normal(size=(B, 2, 4)), g.integers(0, 3, (B, 2)), g.normal(size=B),
                  g.normal(size=(B, 5)), g.normal(size=(B, 2, 4)), np.zeros(B, bool))
    y = g.normal(size=B)

    def f():
        q, mp, _ = online_qtot(ens, 0, batch)
        return demar_loss(q, y, mp, 0.1)

    params = ens.mixers[0].params() + [pb for row in ens.agents for net in row for pb in net.params()]
    return f, params


def gradcheck_all(tol: float = 1e-4) -> dict[str, G.GradCheck]:
    out = {name: G.finite_diff_check(f, ps, tol=tol) for name, (f, ps) in _gradcheck_cases().items()}
    f, ps = _loss_case()
    out["end-to-end loss"] = G.finite_diff_check(f, ps, tol=tol)
    return out
