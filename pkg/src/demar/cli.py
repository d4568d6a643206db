"""Command-line front end: ``demar train | verify | sweep | eval``.

Exit codes: 0 ok, 1 usage error, 2 training diverged, 3 verification failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as C
from . import oracle as O

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3
VERIFY_TARGETS = ("eq5", "lemma1", "theorem1", "theorem1_elu", "gradcheck")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file or bundled preset name")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads for Monte-Carlo shards")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="demar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train one run and write metrics.csv")
    _common(t)

    v = sub.add_parser("verify", help="run an analytic oracle")
    v.add_argument("which", help="|".join(VERIFY_TARGETS))
    _common(v)
    v.add_argument("--samples", type=int, default=1_000_000)
    v.add_argument("--m", type=int)
    v.add_argument("--eps", type=float)
    v.add_argument("--gamma", type=float, default=0.99)
    v.add_argument("--n-agents", type=int, default=3)
    v.add_argument("--w", default=None, help="mixer weight(s), comma separated")
    v.add_argument("--alpha", type=float)
    v.add_argument("--dy", type=float, default=1.0)

    s = sub.add_parser("sweep", help="one stage of the sequential hyperparameter search")
    _common(s)
    s.add_argument("--stage", type=int, required=True)

    e = sub.add_parser("eval", help="greedy evaluation of a saved checkpoint")
    _common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=100)
    return parser


def load_config(args) -> C.RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = C.parse_value(key.strip(), val)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return C.load(args.config, overrides)


# --- train ------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .runner import train

    cfg = load_config(args)
    out = Path(args.out or "runs/train")
    result = train(cfg, out)
    last = result.rows[-1] if result.rows else None
    if last is not None:
        print(f"step {last.step}: return {last.episode_return:.4f}  est {last.est_qtot:.4f}  "
              f"true {last.true_qtot:.4f}  ratio {last.est_true_ratio:.4f}")
    if result.status == "diverged":
        print(f"diverged: {result.message}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


# --- verify -----------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _floats(text: str | None, default: list[float]) -> list[float]:
    return default if text is None else [float(x) for x in text.split(",")]


def run_verify(which: str, args) -> list[Check]:
    seed = args.seed or 0
    th = args.threads
    if which == "eq5":
        m, eps = args.m or 2, 1.0 if args.eps is None else args.eps
        rep = O.single_agent_bias_mc(m, eps, args.gamma, args.samples, seed, th)
        checks = [Check(f"eq5 m={m} eps={eps} gamma={args.gamma}", rep.passed,
                        f"measured {rep.measured:.6f} +- {rep.ci_halfwidth:.6f}, predicted {rep.predicted_hi:.6f}")]
        series = [O.single_agent_bias_mc(mm, eps, args.gamma, args.samples, seed, th).measured for mm in (1, 2, 4, 8)]
        mono = series[0] >= 0 and all(b >= a for a, b in zip(series, series[1:]))
        checks.append(Check("eq5 monotone in m over 1,2,4,8", mono, " ".join(f"{x:.6f}" for x in series)))
        return checks
    if which == "lemma1":
        m, eps = args.m or 4, 0.5 if args.eps is None else args.eps
        w = _floats(args.w, [1.0])[0]
        n = args.n_agents
        base = O.lemma1_bias_mc(w, n, m, eps, args.gamma, args.samples, seed, th)
        checks = [Check(f"lemma1 linear N={n} w={w} m={m} eps={eps}", base.passed,
                        f"measured {base.measured:.6f} +- {base.ci_halfwidth:.6f}, predicted {base.predicted_hi:.6f}")]
        for label, kw in (("2N", dict(w=w, n_agents=2 * n)), ("2w", dict(w=2 * w, n_agents=n))):
            rep = O.lemma1_bias_mc(kw["w"], kw["n_agents"], m, eps, args.gamma, args.samples, seed, th)
            ratio = rep.measured / base.measured if base.measured else float("nan")
            tol = 2.0 * (rep.ci_halfwidth + 2 * base.ci_halfwidth) / max(base.measured, 1e-12)
            checks.append(Check(f"lemma1 scaling {label}", rep.passed and abs(ratio - 2.0) <= tol,
                                f"ratio {ratio:.5f} (tolerance {tol:.5f})"))
        params, q_star = O.demo_elu_mixer()
        elu = O.lemma1_bias_mc_elu(params, q_star, m, eps, args.gamma, min(args.samples, 200_000), seed, th)
        checks.append(Check("lemma1 elu bounds", elu.passed,
                            f"measured {elu.measured:.6f} +- {elu.ci_halfwidth:.6f} in "
                            f"[{elu.predicted_lo:.6f}, {elu.predicted_hi:.6f}]"))
        return checks
    if which == "theorem1":
        w = _floats(args.w, [0.5, 1.5])
        alpha = 0.1 if args.alpha is None else args.alpha
        rep = O.theorem1_onestep(w, args.dy, alpha)
        return [Check(f"theorem1 alpha={alpha} dy={args.dy} w={w}", rep.passed,
                      f"dQ={np.round(rep.delta_q, 12).tolist()} dQ_tot={rep.delta_qtot:.12g} "
                      f"predicted {rep.predicted_qtot:.12g} lower bound {rep.lower_bound:.12g} error {rep.error:.3g}")]
    if which == "theorem1_elu":
        alpha = 1e-3 if args.alpha is None else args.alpha
        params, q0 = O.demo_elu_mixer()
        ratio = O.elu_order_ratio(params, q0, args.dy, alpha)
        rep = O.theorem1_onestep_elu(params, q0, args.dy, alpha)
        return [Check(f"theorem1_elu alpha={alpha} vs {alpha / 2}", 3.5 <= ratio <= 4.5,
                      f"dQ_tot {rep.measured:.10g} predicted {rep.predicted:.10g} residual ratio {ratio:.4f}")]
    if which == "gradcheck":
        return [Check(f"gradcheck {name}", res.passed, f"max rel error {res.max_rel_error:.3g}")
                for name, res in O.gradcheck_all().items()]
    raise UsageError(f"unknown verify target {which!r}; choose from {', '.join(VERIFY_TARGETS)}")


def cmd_verify(args) -> int:
    if args.which not in VERIFY_TARGETS:
        raise UsageError(f"unknown verify target {args.which!r}; choose from {', '.join(VERIFY_TARGETS)}")
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    checks = run_verify(args.which, args)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"verify-{args.which}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "verdict", "detail"])
            for c in checks:
                w.writerow([c.name, "pass" if c.passed else "fail", c.detail])
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY


# --- sweep ------------------------------------------------------------------------

STAGE_KEYS = {1: ("alpha_reg",), 2: ("H", "N_H"), 3: ("K", "N_K")}


@dataclass
class Trial:
    params: dict
    ratio: float
    episode_return: float
    status: str
    path: str


def _pairs(items) -> list[tuple[int, int]]:
    out = []
    for item in items:
        a, b = str(item).split(":")
        out.append((int(a), int(b)))
    return out


def stage_candidates(cfg: C.RunConfig, stage: int) -> list[dict]:
    if stage == 1:
        return [{"alpha_reg": a} for a in sorted(cfg.sweep_alpha_reg)]
    grid = _pairs(cfg.sweep_h if stage == 2 else cfg.sweep_k)
    keys = STAGE_KEYS[stage]
    return [dict(zip(keys, pair)) for pair in grid]


def run_trial(cfg: C.RunConfig, root: Path) -> Trial:
    """Train the first ``sweep_steps`` of one candidate, reusing an identical earlier trial under ``root``."""
    from .runner import train

    text = cfg.to_text()
    key = hashlib.sha256(text.encode()).hexdigest()[:12]
    path = root / "trials" / key
    summary = path / "result.json"
    if summary.is_file():
        data = json.loads(summary.read_text())
    else:
        res = train(cfg, path, stop_at=cfg.sweep_steps)
        last = res.rows[-1] if res.rows else None
        ratio = last.est_true_ratio if res.status == "ok" and last is not None else float("inf")
        if not math.isfinite(ratio):
            ratio = float("inf")
        data = {"status": res.status, "ratio": ratio if math.isfinite(ratio) else "inf",
                "episode_return": last.episode_return if last else float("nan")}
        summary.write_text(json.dumps(data, sort_keys=True, indent=1))
    ratio = float(data["ratio"])
    return Trial({}, ratio, float(data["episode_return"]), data["status"], str(path))


def select(stage: int, trials: list[Trial], r_max: float) -> tuple[Trial, bool]:
    ok = [t for t in trials if t.status == "ok" and t.ratio < r_max]
    if ok:
        if stage == 1:
            return ok[0], True  # candidates are sorted ascending in alpha_reg
        return min(ok, key=lambda t: (abs(t.ratio - 1.0), -t.episode_return)), True
    return min(trials, key=lambda t: (t.ratio, -t.episode_return)), False


def cmd_sweep(args) -> int:
    if args.stage not in (1, 2, 3):
        raise UsageError("--stage must be 1, 2 or 3")
    cfg = load_config(args)
    root = Path(args.out or "runs/sweep")
    root.mkdir(parents=True, exist_ok=True)
    chosen: dict = {}
    for prev in range(1, args.stage):
        f = root / f"stage{prev}.json"
        if not f.is_file():
            raise UsageError(f"stage {args.stage} needs the results of stage {prev} ({f} not found)")
        chosen.update(json.loads(f.read_text())["chosen"])
    base = cfg.replace(**chosen, method="demar")
    trials = []
    for cand in stage_candidates(base, args.stage):
        trial = run_trial(base.replace(**cand), root)
        trial.params = cand
        trials.append(trial)
        print(f"stage {args.stage} {cand}: status {trial.status} ratio {trial.ratio:.4f} "
              f"return {trial.episode_return:.4f}")
    best, resolved = select(args.stage, trials, base.r_max)
    chosen.update(best.params)
    (root / f"stage{args.stage}.json").write_text(json.dumps({
        "stage": args.stage, "resolved": resolved, "chosen": chosen,
        "trials": [{"params": t.params, "ratio": t.ratio if math.isfinite(t.ratio) else "inf",
                    "episode_return": t.episode_return, "status": t.status, "path": t.path} for t in trials],
    }, sort_keys=True, indent=1))
    label = "resolved" if resolved else "unresolved"
    print(f"stage {args.stage} {label}: chosen {json.dumps(chosen, sort_keys=True)}")
    return EXIT_OK


# --- eval -------------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .nets import load_checkpoint
    from .runner import build_learner, eval_world

    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    cfg = load_config(args)
    env = cfg.make_env()
    learner = build_learner(cfg, env)
    load_checkpoint(args.checkpoint, learner.networks())
    gap = O.estimation_gap(learner, eval_world(cfg, env), cfg.gamma, args.episodes)
    rets = np.asarray(gap.returns)
    hw = O.Z99 * rets.std(ddof=1) / math.sqrt(rets.size) if rets.size > 1 else float("nan")
    line = (f"return {rets.mean()!r} +- {hw!r} over {rets.size} episodes; est {gap.est!r} true {gap.true!r} "
            f"ratio {gap.ratio!r}")
    print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episodes", "return_mean", "return_ci99", "est_qtot", "true_qtot", "est_true_ratio"])
            w.writerow([rets.size, repr(float(rets.mean())), repr(float(hw)), repr(gap.est), repr(gap.true),
                        repr(gap.ratio)])
    return EXIT_OK


COMMANDS = {"train": cmd_train, "verify": cmd_verify, "sweep": cmd_sweep, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; choose from train, verify, sweep, eval")
        return COMMANDS[args.command](args)
    except (UsageError, C.ConfigError) as e:
        print(f"demar: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        # checkpoint/dimension mismatches and invalid oracle parameters
        print(f"demar: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
