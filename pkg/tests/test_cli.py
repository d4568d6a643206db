import csv
import json

import numpy as np
import pytest

from demar import cli
from demar import config as C
from demar.nets import save_checkpoint
from demar.runner import HEADER, build_learner, train
from demar.worlds import solve_optimal_q

SHORT = ["--set", "total_steps=600", "--set", "eval_interval=300", "--set", "eval_episodes=2",
         "--set", "learning_starts=100", "--set", "horizon=60"]


def run(*argv):
    return cli.main([str(a) for a in argv])


# --- config ---------------------------------------------------------------------

def test_unknown_key_rejected(tmp_path):
    f = tmp_path / "a.cfg"
    f.write_text("include = tabular-noisy\nlearning_rat = 0.1\n")
    with pytest.raises(C.ConfigError, match="learning_rat"):
        C.load(str(f))
    assert run("train", "--config", f, "--out", tmp_path / "o") == 1
    assert run("train", "--set", "nope=1", "--out", tmp_path / "o") == 1


@pytest.mark.parametrize("text", ["total_steps = 0", "method = dqn", "noise = pink", "lr_final_frac = 2",
                                  "batch_size = 0", "total_steps = many"])
def test_invalid_values_rejected_at_parse(tmp_path, text):
    f = tmp_path / "a.cfg"
    f.write_text(text + "\n")
    with pytest.raises(C.ConfigError):
        C.load(str(f))


def test_qmix_path_refuses_ensemble_settings():
    with pytest.raises(C.ConfigError):
        C.load("qmix", {"K": 2})


def test_precedence_file_then_environment_then_flags(tmp_path):
    f = tmp_path / "a.cfg"
    f.write_text("# comment line\ninclude = tabular-noisy\nlr = 0.1  # trailing comment\nseed = 4\n")
    assert C.load(str(f), environ={}).lr == 0.1
    assert C.load(str(f), environ={"DEMAR_LR": "0.2"}).lr == 0.2
    assert C.load(str(f), {"lr": 0.3}, environ={"DEMAR_LR": "0.2"}).lr == 0.3
    assert C.load(str(f), environ={"DEMAR_N_H": "2", "DEMAR_H": "3"}).N_H == 2


def test_config_text_round_trips(tmp_path):
    cfg = C.load("demar", {"agent_hidden": (7, 5)})
    f = tmp_path / "round.cfg"
    f.write_text(cfg.to_text())
    assert C.load(str(f), environ={}) == cfg


def test_presets_carry_the_table_values():
    names = C.preset_names()
    wcu = [n for n in names if n.endswith("-wcu")]
    assert len(wcu) == 7 and all(C.load(n).wcu_w == 0.75 and C.load(n).H == 2 for n in wcu)
    expected = {  # (H, N_H, K, N_K, alpha_reg) per task
        "mpe-simple-tag": (3, 2, 1, 1, 0.002), "mpe-simple-world": (10, 2, 1, 1, 0.02),
        "mpe-simple-adversary": (10, 2, 10, 4, 0.05), "smac-5m_vs_6m": (3, 2, 1, 1, 0.002),
        "smac-2s3z": (3, 2, 1, 1, 0.002), "smac-3s5z": (10, 2, 1, 1, 0.001),
        "smac-10m_vs_11m": (4, 2, 1, 1, 0.01),
    }
    for task, (H, N_H, K, N_K, a) in expected.items():
        c = C.load(f"{task}-demar")
        assert (c.H, c.K, c.N_K, c.alpha_reg) == (H, K, N_K, a), task
    for name in names:
        C.load(name)  # every preset parses and validates


def test_missing_config_is_a_usage_error(tmp_path):
    assert run("train", "--config", "no-such-preset", "--out", tmp_path) == 1
    assert run() == 1
    assert run("bogus") == 1


# --- train ----------------------------------------------------------------------

def test_train_twice_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("train", "--config", "demar", "--seed", 3, "--out", tmp_path / d, *SHORT) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "checkpoint.npz").read_bytes() == (b / "checkpoint.npz").read_bytes()
    rows = list(csv.reader(open(a / "metrics.csv")))
    assert rows[0] == HEADER and [r[0] for r in rows[1:]] == ["300", "600"]


def test_degenerate_preset_matches_reference_qmix(tmp_path):
    for name in ("qmix", "qmix-degenerate"):
        assert run("train", "--config", name, "--out", tmp_path / name, *SHORT) == 0
    assert (tmp_path / "qmix" / "metrics.csv").read_bytes() == \
        (tmp_path / "qmix-degenerate" / "metrics.csv").read_bytes()


def test_seed_changes_the_run(tmp_path):
    for s in (1, 2):
        run("train", "--config", "qmix", "--seed", s, "--out", tmp_path / str(s), *SHORT)
    assert (tmp_path / "1" / "metrics.csv").read_bytes() != (tmp_path / "2" / "metrics.csv").read_bytes()


def test_divergence_exit_code_and_partial_csv(tmp_path):
    code = run("train", "--config", "vanilla", "--out", tmp_path, *SHORT, "--set", "lr=1e6",
               "--set", "grad_clip=0", "--set", "optimizer=sgd")
    assert code == 2
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[0] == HEADER
    assert (tmp_path / "checkpoint.npz").is_file()


# --- verify ---------------------------------------------------------------------

def test_verify_theorem1_prints_closed_form(capsys):
    assert run("verify", "theorem1", "--alpha", 0.1, "--dy", 1, "--w", "0.5,1.5") == 0
    out = capsys.readouterr().out
    assert out.startswith("PASS") and "dQ_tot=0.5 " in out and "[0.1, 0.3]" in out


@pytest.mark.parametrize("which", ["eq5", "lemma1", "theorem1_elu", "gradcheck"])
def test_verify_targets_pass(which, tmp_path):
    assert run("verify", which, "--samples", 100_000, "--out", tmp_path) == 0
    rows = list(csv.reader(open(tmp_path / f"verify-{which}.csv")))
    assert rows[0] == ["check", "verdict", "detail"] and all(r[1] == "pass" for r in rows[1:])


def test_verify_failure_exit_code():
    # far too large a step: the residual is no longer second order
    assert run("verify", "theorem1_elu", "--alpha", 5.0) == 3


def test_verify_usage_errors():
    assert run("verify", "eq6") == 1
    assert run("verify", "eq5", "--samples", 100) == 1
    assert run("verify", "eq5", "--threads", 0) == 1


def test_verify_output_independent_of_threads(tmp_path):
    for t in (1, 8):
        assert run("verify", "lemma1", "--samples", 50_000, "--threads", t, "--out", tmp_path / str(t)) == 0
    assert (tmp_path / "1" / "verify-lemma1.csv").read_bytes() == (tmp_path / "8" / "verify-lemma1.csv").read_bytes()


# --- sweep ----------------------------------------------------------------------

def _sweep_cfg(tmp_path, **grids):
    lines = ["include = tabular-noisy", "total_steps = 600", "sweep_steps = 400", "eval_interval = 200",
             "eval_episodes = 2", "learning_starts = 100", "horizon = 60"]
    lines += [f"{k} = {v}" for k, v in grids.items()]
    f = tmp_path / "sweep.cfg"
    f.write_text("\n".join(lines) + "\n")
    return f


def test_sweep_stage_order_enforced(tmp_path):
    f = _sweep_cfg(tmp_path)
    assert run("sweep", "--stage", 2, "--config", f, "--out", tmp_path / "s") == 1
    assert run("sweep", "--stage", 4, "--config", f, "--out", tmp_path / "s") == 1


def test_sweep_single_candidates_are_chosen(tmp_path):
    f = _sweep_cfg(tmp_path, sweep_alpha_reg="0.002", sweep_h="2:1", sweep_k="3:2", r_max=1e9)
    out = tmp_path / "s"
    for stage in (1, 2, 3):
        assert run("sweep", "--stage", stage, "--config", f, "--out", out) == 0
    final = json.loads((out / "stage3.json").read_text())
    assert final["chosen"] == {"alpha_reg": 0.002, "H": 2, "N_H": 1, "K": 3, "N_K": 2}
    assert final["resolved"]
    # each trial stopped at sweep_steps and wrote its own metrics
    for t in final["trials"]:
        rows = list(csv.reader(open(f"{t['path']}/metrics.csv")))
        assert rows[-1][0] == "400"


def test_sweep_unresolved_surfaces_best(tmp_path):
    f = _sweep_cfg(tmp_path, sweep_alpha_reg="0.0,0.02", r_max=-1.0)
    assert run("sweep", "--stage", 1, "--config", f, "--out", tmp_path / "s") == 0
    res = json.loads((tmp_path / "s" / "stage1.json").read_text())
    assert not res["resolved"]
    best = min(res["trials"], key=lambda t: (float(t["ratio"]), -t["episode_return"]))
    assert res["chosen"] == best["params"]


def test_select_rules():
    T = cli.Trial
    trials = [T({"a": 0}, 12.0, 5.0, "ok", ""), T({"a": 1}, 3.0, 1.0, "ok", ""), T({"a": 2}, 1.5, 1.0, "ok", "")]
    assert cli.select(1, trials, 10.0) == (trials[1], True)  # smallest passing alpha
    assert cli.select(2, trials, 10.0) == (trials[2], True)  # closest to 1
    tie = [T({"h": 1}, 1.2, 1.0, "ok", ""), T({"h": 2}, 0.8, 2.0, "ok", "")]
    assert cli.select(3, tie, 10.0)[0] is tie[1]  # equal distance, higher return
    assert cli.select(2, [T({}, float("inf"), 0.0, "diverged", "")], 10.0)[1] is False


# --- eval -----------------------------------------------------------------------

def test_eval_rejects_zero_episodes(tmp_path):
    assert run("train", "--config", "qmix", "--out", tmp_path, *SHORT) == 0
    assert run("eval", "--config", "qmix", "--checkpoint", tmp_path / "checkpoint.npz", "--episodes", 0) == 1


def test_eval_rejects_shape_mismatch(tmp_path, capsys):
    assert run("train", "--config", "qmix", "--out", tmp_path, *SHORT) == 0
    code = run("eval", "--config", "qmix", "--set", "agent_hidden=16", "--checkpoint",
               tmp_path / "checkpoint.npz", "--episodes", 2)
    assert code == 1
    assert "shape mismatch" in capsys.readouterr().err
    assert run("eval", "--config", "demar", "--checkpoint", tmp_path / "checkpoint.npz", "--episodes", 2) == 1


def test_eval_twice_is_identical(tmp_path, capsys):
    assert run("train", "--config", "demar", "--out", tmp_path / "t", *SHORT) == 0
    capsys.readouterr()
    outs = []
    for d in ("a", "b"):
        assert run("eval", "--config", "demar", "--checkpoint", tmp_path / "t" / "checkpoint.npz",
                   "--episodes", 5, "--out", tmp_path / d, *SHORT) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]
    assert (tmp_path / "a" / "eval.csv").read_bytes() == (tmp_path / "b" / "eval.csv").read_bytes()


def test_eval_of_exact_values_returns_v_star(tmp_path):
    """Linear agents that pick the optimal joint action and a mixer whose bias head outputs V*."""
    f = tmp_path / "oracle.cfg"
    f.write_text("include = qmix-degenerate\nnoise = none\nmixer = linear\nagent_hidden =\nhyper_hidden = 20\n")
    cfg = C.load(str(f), environ={})
    env = cfg.make_env()
    sol = solve_optimal_q(env)
    learner = build_learner(cfg, env)
    nets = learner.networks()
    agents = sorted(k for k in nets if k.startswith("agent"))
    (mixer,) = [nets[k] for k in nets if k.startswith("mixer")]
    best = np.array([np.unravel_index(int(np.argmax(sol.q[s])), (env.n_actions,) * env.n_agents)
                     for s in range(env.n_states)])
    for i, name in enumerate(agents):
        W, b = nets[name].body.layers[0]
        W.value[...] = np.eye(env.n_actions)[best[:, i]]
        b.value[...] = 0.0
    (w0, b0), (w1, b1) = mixer.heads["w"].layers
    w1.value[...] = 0.0
    b1.value[...] = 0.0
    (h0, c0), (h1, c1) = mixer.heads["b"].layers
    h0.value[...] = np.eye(20)
    c0.value[...] = 0.0
    h1.value[...] = sol.v[:, None]
    c1.value[...] = 0.0
    save_checkpoint(tmp_path / "oracle.npz", nets)

    assert run("eval", "--config", f, "--checkpoint", tmp_path / "oracle.npz", "--episodes", 1500,
               "--out", tmp_path) == 0
    row = list(csv.DictReader(open(tmp_path / "eval.csv")))[0]
    v_star = sol.start_value(env.start)
    assert abs(float(row["return_mean"]) - v_star) <= float(row["return_ci99"])
