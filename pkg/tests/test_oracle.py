import numpy as np
import pytest

from demar import ensembles as E
from demar import oracle as O
from demar.nets import Linear, MixerParams, QmixElu
from demar.replay import Batch
from demar.worlds import NoiseSpec, TabularGame, all_joint, make_world, solve_optimal_q

N = 200_000  # enough for the checks below; the acceptance suite runs the full 10^6


# --- single-agent bias -----------------------------------------------------------

def test_eq5_single_action_is_exactly_zero():
    rep = O.single_agent_bias_mc(1, 1.0, 0.99, samples=N)
    assert rep.measured == 0.0 and rep.ci_halfwidth == 0.0 and rep.passed


@pytest.mark.parametrize("m, eps, want", [(2, 1.0, 0.33), (4, 0.5, 0.297)])
def test_eq5_examples(m, eps, want):
    assert O.eq5_prediction(m, eps, 0.99) == pytest.approx(want, abs=1e-12)
    rep = O.single_agent_bias_mc(m, eps, 0.99, samples=N, seed=1)
    assert rep.passed, rep


def test_eq5_monotone_in_m():
    vals = [O.single_agent_bias_mc(m, 1.0, 0.99, samples=N, seed=2).measured for m in (1, 2, 4, 8)]
    assert vals[0] >= 0 and all(b >= a for a, b in zip(vals, vals[1:]))


def test_too_few_samples_rejected():
    with pytest.raises(ValueError):
        O.single_agent_bias_mc(2, 1.0, 0.99, samples=9_999)
    with pytest.raises(ValueError):
        O.lemma1_bias_mc(1.0, 3, 4, 0.5, 0.99, samples=100)


def test_results_do_not_depend_on_thread_count():
    a = O.single_agent_bias_mc(4, 0.5, 0.99, samples=50_000, seed=3, threads=1)
    b = O.single_agent_bias_mc(4, 0.5, 0.99, samples=50_000, seed=3, threads=8)
    assert (a.measured, a.ci_halfwidth) == (b.measured, b.ci_halfwidth)


def test_verdict_is_interval_intersection():
    assert O.BiasReport(1.0, 1.2, 1.3, 0.2, 10).passed
    assert not O.BiasReport(1.0, 1.2, 1.3, 0.19, 10).passed
    assert O.BiasReport(1.5, 1.2, 1.3, 0.2, 10).verdict == "pass"


# --- multi-agent bias ------------------------------------------------------------

def test_lemma1_example():
    rep = O.lemma1_bias_mc(1.0, 3, 4, 0.5, 0.99, samples=N)
    assert rep.predicted_lo == pytest.approx(0.891, abs=1e-12)
    assert rep.passed, rep


def test_lemma1_zero_weight_is_zero():
    rep = O.lemma1_bias_mc(0.0, 3, 4, 0.5, 0.99, samples=N)
    assert rep.measured == 0.0 and rep.passed


def test_lemma1_scales_linearly():
    base = O.lemma1_bias_mc(1.0, 3, 4, 0.5, 0.99, samples=N, seed=4)
    for rep in (O.lemma1_bias_mc(1.0, 6, 4, 0.5, 0.99, samples=N, seed=5),
                O.lemma1_bias_mc(2.0, 3, 4, 0.5, 0.99, samples=N, seed=6)):
        assert abs(rep.measured - 2 * base.measured) <= rep.ci_halfwidth + 2 * base.ci_halfwidth


def test_lemma1_elu_within_gradient_bounds():
    params, q0 = O.demo_elu_mixer()
    rep = O.lemma1_bias_mc_elu(params, q0, 4, 0.5, 0.99, samples=50_000)
    assert 0 < rep.predicted_lo < rep.predicted_hi
    assert rep.passed, rep


# --- one-step propagation --------------------------------------------------------

def test_theorem1_example():
    rep = O.theorem1_onestep([0.5, 1.5], 1.0, 0.1)
    np.testing.assert_allclose(rep.delta_q, [0.1, 0.3], rtol=0, atol=1e-10)
    assert abs(rep.delta_qtot - 0.5) < 1e-10 and rep.passed
    assert rep.lower_bound == pytest.approx(2 * 0.1 * 2 * 0.25)


def test_theorem1_unbiased_target_moves_nothing():
    rep = O.theorem1_onestep([0.5, 1.5], 0.0, 0.1)
    assert np.all(rep.delta_q == 0) and rep.delta_qtot == 0


def test_theorem1_zero_weights_block_propagation():
    rep = O.theorem1_onestep([0.0, 0.0, 0.0], 1.0, 0.1)
    assert np.all(rep.delta_q == 0) and rep.delta_qtot == 0


@pytest.mark.parametrize("w", [[0.1], [0.0, 2.0], [0.3, 0.7, 1.1]])
@pytest.mark.parametrize("dy", [0.5, 3.0])
def test_theorem1_sign_correct(w, dy):
    rep = O.theorem1_onestep(w, dy, 0.05, q_star=np.linspace(-1, 1, len(w)))
    assert rep.delta_qtot > 0 and rep.passed
    assert rep.delta_qtot >= rep.lower_bound - 1e-12


def test_theorem1_rejects_nonlinear_mixer():
    params, _ = O.demo_elu_mixer()
    with pytest.raises(ValueError):
        O.theorem1_onestep(params, 1.0, 0.1)
    with pytest.raises(ValueError):
        O.theorem1_onestep([-0.5, 1.0], 1.0, 0.1)


def test_theorem1_elu_second_order_residual():
    params, q0 = O.demo_elu_mixer()
    assert 3.5 <= O.elu_order_ratio(params, q0, 1.0, 1e-3) <= 4.5


def test_theorem1_elu_affine_region_is_exact():
    w1 = np.array([[0.8, 0.3], [0.4, 0.9]])
    params = MixerParams.single(QmixElu(2), w1, np.array([5.0, 5.0]), np.array([0.6, 1.2]), 0.0)
    rep = O.theorem1_onestep_elu(params, [0.5, 0.8], 1.0, 0.1)
    assert rep.residual < 1e-10


def test_theorem1_elu_zero_output_layer():
    params, q0 = O.demo_elu_mixer()
    params.w2[...] = 0.0
    assert O.theorem1_onestep_elu(params, q0, 1.0, 0.1).measured == 0.0


# --- diagnostics -----------------------------------------------------------------

def _batch(dims, B=16, seed=0):
    g = np.random.default_rng(seed)
    return Batch(g.normal(size=(B, dims.state_dim)), g.normal(size=(B, dims.n_agents, dims.obs_dim)),
                 g.integers(0, dims.n_actions, (B, dims.n_agents)), g.normal(size=B),
                 g.normal(size=(B, dims.state_dim)), g.normal(size=(B, dims.n_agents, dims.obs_dim)),
                 np.zeros(B, bool))


def test_probe_linear_mixer_reports_hypernet_weights():
    dims = E.Dims(3, 4, 5, 2, (8,), 6, Linear())
    ens = E.init(E.EnsembleConfig(H=2), dims, 1)
    batch = _batch(dims)
    stats = O.probe_mixer_grad(ens, batch)
    w = np.stack([m.forward_np(batch.state).w1 for m in ens.mixers])
    assert (stats.mean, stats.max, stats.min) == pytest.approx((w.mean(), w.max(), w.min()), abs=1e-12)


def test_probe_fresh_nets_finite_non_negative():
    dims = E.Dims(3, 4, 5, 2, (8,), 6, QmixElu(4))
    stats = O.probe_mixer_grad(E.init(E.EnsembleConfig(H=3, K=2), dims, 2), _batch(dims))
    assert np.isfinite([stats.mean, stats.max, stats.min]).all() and stats.min >= 0


class _TableLearner:
    """Greedy on Q* with Q_tot read straight from ``scale * Q*``."""

    def __init__(self, game, q, scale=1.0):
        self.q, self.scale = q, scale
        self.joint = all_joint(game.n_agents, game.n_actions)

    def act(self, obs, eps, rng):
        return self.joint[int(np.argmax(self.q[int(np.argmax(obs[0]))]))]

    def estimate_qtot(self, states, obs):
        s = np.argmax(states, axis=1)
        return self.scale * self.q[s].max(axis=1)


def test_estimation_gap_of_exact_values_is_one():
    from demar.worlds import rollout_true_q
    game = TabularGame()
    learner = _TableLearner(game, solve_optimal_q(game).q)
    rep = O.estimation_gap(learner, make_world(game, NoiseSpec(), 0), game.gamma, 2000)
    # replay the same episodes one at a time: visits within an episode are correlated, so the
    # interval on est/true - 1 is built from per-episode sums.  Those sums are heavy-tailed (long
    # episodes), which is why the normal interval needs a couple of thousand episodes here
    world = make_world(game, NoiseSpec(), 0)
    d, n = [], []
    for _ in range(2000):
        visits, _ = rollout_true_q(world, lambda o, s: learner.act(o, 0.0, None), game.gamma, 1)
        est = learner.estimate_qtot(np.stack([v.state for v in visits]), None)
        d.append(float(np.sum(est - [v.ret for v in visits])))
        n.append(len(visits))
    d, n = np.array(d), np.array(n)
    gap = d.sum() / n.sum()
    assert gap == pytest.approx(rep.gap, rel=1e-9)
    half = O.Z99 * np.sqrt(np.sum((d - gap * n) ** 2) * len(d) / (len(d) - 1)) / n.sum()
    assert abs(rep.ratio - 1.0) <= half / rep.true


def test_estimation_gap_doubles_with_doubled_values():
    game = TabularGame(horizon=400)
    sol = solve_optimal_q(game)
    one = O.estimation_gap(_TableLearner(game, sol.q), make_world(game, NoiseSpec(), 0), game.gamma, 400)
    two = O.estimation_gap(_TableLearner(game, sol.q, 2.0), make_world(game, NoiseSpec(), 0), game.gamma, 400)
    assert two.true == one.true
    assert two.ratio == pytest.approx(2 * one.ratio, rel=1e-12)


def test_estimation_gap_gamma_zero_compares_immediate_reward():
    game = TabularGame(gamma=0.0, horizon=30)
    sol = solve_optimal_q(game)
    rep = O.estimation_gap(_TableLearner(game, sol.q), make_world(game, NoiseSpec(), 0), 0.0, 20)
    assert rep.ratio == pytest.approx(1.0, abs=1e-12)


def test_estimation_gap_degenerate_cases():
    game = TabularGame(horizon=5)
    sol = solve_optimal_q(game)
    zero = TabularGame(horizon=5)
    zero.reward = np.zeros_like(zero.reward)
    rep = O.estimation_gap(_TableLearner(zero, sol.q), make_world(zero, NoiseSpec(), 0), 0.9, 3)
    assert np.isnan(rep.ratio) and rep.gap == rep.est
    rep = O.estimation_gap(_TableLearner(game, sol.q, np.inf), make_world(game, NoiseSpec(), 0), 0.9, 3)
    assert rep.ratio == np.inf
    with pytest.raises(ValueError):
        O.estimation_gap(_TableLearner(game, sol.q), make_world(game, NoiseSpec(), 0), 0.9, 0)


def test_gradcheck_registry_passes():
    results = O.gradcheck_all()
    assert len(results) >= 18
    bad = {k: v.max_rel_error for k, v in results.items() if not v.passed}
    assert not bad
