"""Rollout + learn loop with periodic greedy evaluation and CSV metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import ensembles as E
from . import rng as R
from .config import RunConfig
from .learner import DivergenceError, Learner, LinearSchedule, Optimizer
from .nets import save_checkpoint
from .oracle import estimation_gap
from .reference import QmixReference
from .replay import ReplayBuffer, Transition
from .worlds import World, make_world


@dataclass
class MetricsRow:
    step: int
    episode_return: float
    loss: float
    est_qtot: float
    true_qtot: float
    est_true_ratio: float
    mean_mixer_grad: float
    epsilon: float


HEADER = [f.name for f in fields(MetricsRow)]


def format_row(row: MetricsRow) -> list[str]:
    return [str(v) if isinstance(v, int) else repr(float(v)) for v in asdict(row).values()]


def eval_world(cfg: RunConfig, env) -> World:
    """A fresh evaluation world on fixed streams: every evaluation replays the same randomness."""
    return World(env, cfg.noise_spec(), R.stream(cfg.seed, R.EVAL, 0), R.stream(cfg.seed, R.EVAL, 1))


def build_learner(cfg: RunConfig, env):
    dims = cfg.dims(env)
    opt = Optimizer(cfg.optimizer, cfg.lr, clip=cfg.grad_clip if cfg.grad_clip > 0 else None)
    if cfg.method == "qmix":
        return QmixReference(dims, cfg.gamma, cfg.target_period, opt, cfg.batch_size, cfg.seed)
    ens = E.init(cfg.ensemble_config(), dims, cfg.seed)
    return Learner(ens, cfg.target_spec(), opt, cfg.batch_size, R.stream(cfg.seed, R.SUBSETS))


@dataclass
class RunResult:
    status: str               # "ok" or "diverged"
    rows: list
    csv_text: str
    learner: object
    message: str = ""


def train(cfg: RunConfig, out_dir: str | Path | None = None, stop_at: int | None = None) -> RunResult:
    """Train for ``cfg.total_steps``, or only the first ``stop_at`` steps of that schedule."""
    env = cfg.make_env()
    noise = cfg.noise_spec()
    world = make_world(env, noise, cfg.seed, 0)
    learner = build_learner(cfg, env)
    buffer = ReplayBuffer(cfg.buffer_size, env.n_agents, env.obs_dim, env.state_dim, R.stream(cfg.seed, R.REPLAY))
    explore = R.stream(cfg.seed, R.EXPLORE)
    schedule = LinearSchedule(cfg.eps_start, cfg.eps_end, cfg.eps_steps)
    lr_schedule = LinearSchedule(cfg.lr, cfg.lr * cfg.lr_final_frac, cfg.total_steps)

    out = Path(out_dir) if out_dir is not None else None
    sink = io.StringIO()
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(HEADER)
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(cfg.to_text())
        fh = open(out / "metrics.csv", "w", newline="")
        fh.write(sink.getvalue())

    rows: list[MetricsRow] = []
    losses, grads = [], []
    status, message = "ok", ""
    obs, state = world.reset()
    try:
        last_step = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
        for step in range(1, last_step + 1):
            eps = schedule(step)
            actions = learner.act(obs, eps, explore)
            res = world.step(actions)
            buffer.add(Transition(state, obs, actions, res.reward, res.state, res.obs, res.done))
            if res.done or res.truncated:
                obs, state = world.reset()
            else:
                obs, state = res.obs, res.state
            if step >= cfg.learning_starts and step % cfg.train_every == 0 and len(buffer) >= cfg.batch_size:
                learner.opt.lr = lr_schedule(step)
                m = learner.train_step(buffer)
                losses.append(m.loss)
                grads.append(m.mean_mixer_grad)
            if step % cfg.eval_interval == 0:
                ev = estimation_gap(learner, eval_world(cfg, env), cfg.gamma, cfg.eval_episodes)
                row = MetricsRow(step, float(np.mean(ev.returns)), _mean(losses), ev.est, ev.true, ev.ratio,
                                 _mean(grads), eps)
                losses, grads = [], []
                rows.append(row)
                line = io.StringIO()
                csv.writer(line, lineterminator="\n").writerow(format_row(row))
                sink.write(line.getvalue())
                if fh is not None:
                    fh.write(line.getvalue())
                    fh.flush()
    except DivergenceError as e:
        status, message = "diverged", str(e)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_checkpoint(out / "checkpoint.npz", learner.networks(),
                        {"status": status, "config": cfg.to_text(), "steps": rows[-1].step if rows else 0})
    return RunResult(status, rows, sink.getvalue(), learner, message)


def _mean(xs) -> float:
    return float(np.mean(xs)) if xs else float("nan")
