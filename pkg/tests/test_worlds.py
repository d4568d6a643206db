import numpy as np
import pytest

from demar import rng as R
from demar.worlds import (GridPursuit, NoiseSpec, TabularGame, World, make_world, rollout_true_q,
                          solve_optimal_q)


def _chain(gamma=0.9):
    """Two states, one agent, one action: 0 -> 1 paying 1, then 1 -> 1 paying 0.5 forever."""
    g = TabularGame(n_states=2, n_agents=1, n_actions=1, gamma=gamma, term_prob=0.0)
    g.reward = np.array([[1.0], [0.5]])
    g.trans = np.array([[[0.0, 1.0]], [[0.0, 1.0]]])
    g.start = np.array([1.0, 0.0])
    return g


def _constant(horizon, reward=1.0):
    g = TabularGame(n_states=3, n_agents=2, n_actions=2, gamma=0.9, term_prob=0.0, horizon=horizon)
    g.reward = np.full_like(g.reward, reward)
    return g


# --- noise ----------------------------------------------------------------------

def test_no_noise_is_exact():
    x = np.linspace(-1, 1, 12).reshape(3, 4)
    assert np.array_equal(NoiseSpec().apply(x, np.random.default_rng(0)), x)


def test_uniform_noise_in_half_open_range():
    d = NoiseSpec.uniform(0.0, 0.02).sample((200_000,), np.random.default_rng(1))
    assert d.min() >= 0.0 and d.max() < 0.02
    assert abs(d.mean() - 0.01) < 3 * 0.02 / np.sqrt(12) / np.sqrt(d.size)


def test_uniform_noise_excludes_hi_even_when_generator_returns_almost_one():
    class AlmostOne:
        def random(self, shape):
            return np.full(shape, np.nextafter(1.0, 0.0))
    d = NoiseSpec.uniform(0.0, 0.02).sample((4,), AlmostOne())
    assert np.all(d < 0.02)


def test_gaussian_noise_mean():
    std = 0.1
    d = NoiseSpec.gaussian(0.02, std).sample((1_000_000,), np.random.default_rng(2))
    assert abs(d.mean() - 0.02) < 3 * std / 1e3


@pytest.mark.parametrize("kw", [dict(kind="cauchy"), dict(kind="uniform", lo=0.1, hi=0.1),
                                dict(kind="gaussian", std=-1.0)])
def test_bad_noise_rejected(kw):
    with pytest.raises(ValueError):
        NoiseSpec(**kw)


# --- stepping -------------------------------------------------------------------

def test_step_after_episode_end_rejected():
    w = make_world(_constant(horizon=1), NoiseSpec(), 0)
    with pytest.raises(RuntimeError):
        w.step([0, 0])  # before reset
    w.reset()
    assert w.step([0, 0]).truncated
    with pytest.raises(RuntimeError):
        w.step([0, 0])


@pytest.mark.parametrize("a", [[0], [0, 2], [-1, 0]])
def test_invalid_joint_action_rejected(a):
    w = make_world(_constant(horizon=5), NoiseSpec(), 0)
    w.reset()
    with pytest.raises(ValueError):
        w.step(a)


def test_truncation_is_not_termination():
    w = make_world(_constant(horizon=3), NoiseSpec(), 0)
    w.reset()
    flags = [(r.done, r.truncated) for r in (w.step([0, 1]) for _ in range(3))]
    assert flags == [(False, False), (False, False), (False, True)]


def _trajectory(noise, noise_seed, steps=60):
    g = TabularGame()
    w = World(g, noise, R.stream(5, R.ENV_DYNAMICS), R.stream(noise_seed, R.ENV_NOISE))
    acts = np.random.default_rng(9)
    w.reset()
    out = []
    for _ in range(steps):
        res = w.step(acts.integers(0, g.n_actions, g.n_agents))
        out.append((w.internal, res.reward, res.done, res.obs))
        if res.done or res.truncated:
            w.reset()
    return out


def test_noise_never_perturbs_the_dynamics():
    clean = _trajectory(NoiseSpec(), 0)
    for noise, seed in [(NoiseSpec.uniform(0.0, 0.02), 1), (NoiseSpec.uniform(0.0, 0.02), 2),
                        (NoiseSpec.gaussian(0.0, 0.5), 3)]:
        noisy = _trajectory(noise, seed)
        assert [t[:3] for t in noisy] == [t[:3] for t in clean]
        assert not np.array_equal(noisy[0][3], clean[0][3])


def test_regeneration_is_bit_identical():
    a = _trajectory(NoiseSpec.uniform(0.0, 0.02), 4)
    b = _trajectory(NoiseSpec.uniform(0.0, 0.02), 4)
    assert all(x[:3] == y[:3] and np.array_equal(x[3], y[3]) for x, y in zip(a, b))


def test_game_is_a_function_of_its_seed():
    a, b, c = TabularGame(seed=3), TabularGame(seed=3), TabularGame(seed=4)
    assert np.array_equal(a.reward, b.reward) and np.array_equal(a.trans, b.trans)
    assert not np.array_equal(a.reward, c.reward)
    np.testing.assert_allclose(a.trans.sum(axis=-1), 1.0, atol=1e-12)


def test_reward_gap_gives_each_agent_one_best_action():
    g = TabularGame(coupling=0.0, reward_gap=0.5)
    # with coupling off the joint optimum is worth exactly 1 in every state
    np.testing.assert_allclose(g.reward.max(axis=1), 1.0, atol=1e-12)
    assert g.reward.min() >= 0.0


# --- ground truth ---------------------------------------------------------------

def test_value_iteration_gamma_zero_is_reward():
    g = TabularGame(gamma=0.0)
    sol = solve_optimal_q(g)
    np.testing.assert_array_equal(sol.q, g.reward)


def test_value_iteration_two_state_chain_closed_form():
    gamma = 0.9
    sol = solve_optimal_q(_chain(gamma))
    v1 = 0.5 / (1 - gamma)
    np.testing.assert_allclose(sol.v, [1.0 + gamma * v1, v1], atol=1e-8)
    assert sol.residual < 1e-10


def test_value_iteration_residual_below_tol():
    sol = solve_optimal_q(TabularGame(), tol=1e-10)
    assert sol.residual < 1e-10


def test_value_iteration_guard():
    from types import SimpleNamespace
    huge = SimpleNamespace(n_states=10, n_joint=10 ** 6)  # the guard fires before any table is touched
    with pytest.raises(ValueError):
        solve_optimal_q(huge)


def test_rollout_returns():
    for horizon, want in [(1, 1.0), (2, 1.9)]:
        w = make_world(_constant(horizon), NoiseSpec(), 0)
        visits, returns = rollout_true_q(w, lambda o, s: np.zeros(2, np.int64), 0.9, 3)
        assert returns == [pytest.approx(want, abs=1e-12)] * 3
        assert len(visits) == 3 * horizon
    assert visits[1].ret == pytest.approx(1.0)


def test_optimal_policy_matches_value_iteration():
    g = TabularGame()
    sol = solve_optimal_q(g)
    joint = np.array([[j // 16, (j // 4) % 4, j % 4] for j in range(g.n_joint)])
    policy = lambda o, s: joint[int(np.argmax(sol.q[int(np.argmax(s))]))]
    _, returns = rollout_true_q(make_world(g, NoiseSpec(), 1), policy, g.gamma, 1000)
    r = np.asarray(returns)
    half = 2.5758293035489004 * r.std(ddof=1) / np.sqrt(r.size)
    assert abs(r.mean() - sol.start_value(g.start)) < half


# --- pursuit --------------------------------------------------------------------

def test_pursuit_capture_is_monotone_in_radius():
    def capture_times(radius):
        env = GridPursuit(capture_radius=radius)
        w = make_world(env, NoiseSpec(), 7)
        acts = np.random.default_rng(3)
        times = []
        for _ in range(30):
            w.reset()
            t = 0
            while True:
                res = w.step(acts.integers(0, 5, env.n_agents))
                t += 1
                if res.done or res.truncated:
                    times.append(t if res.done else None)
                    break
            # keep the action stream aligned across radii
            acts.integers(0, 5, (env.horizon - t, env.n_agents))
        return times

    wide, narrow = capture_times(1), capture_times(0)
    for a, b in zip(wide, narrow):
        if b is not None:
            assert a is not None and a <= b
    assert sum(t is not None for t in wide) > sum(t is not None for t in narrow)


def test_pursuit_rewards_and_prey_rule():
    env = GridPursuit(size=5, n_agents=1)
    # a predator in the corner: the prey flees to the cell farthest away among its moves
    assert env.prey_move(((0, 0),), (2, 2)) in {(3, 2), (2, 3)}
    assert env.prey_move(((0, 0),), (2, 2)) == (3, 2)  # first maximising move wins
    from demar.worlds import PursuitState
    r, st, done = env.transition(PursuitState(((2, 1),), (2, 2)), np.array([4]), None)
    assert (r, done) == (9.9, True)
    r, st, done = env.transition(PursuitState(((0, 0),), (4, 4)), np.array([0]), None)
    assert (r, done) == (-0.1, False)
