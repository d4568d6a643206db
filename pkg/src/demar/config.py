"""Run configuration: a flat dataclass read from ``key = value`` text files.

Unknown keys are rejected, values are parsed according to the field type,
and any key can be overridden from the environment as ``DEMAR_<KEY>``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

from . import targets as T
from .ensembles import Dims, EnsembleConfig
from .nets import Linear, QmixElu
from .worlds import GridPursuit, NoiseSpec, TabularGame

ENV_PREFIX = "DEMAR_"
METHODS = ("demar", "qmix", "vanilla", "td3", "subavg", "sqmix", "sm2", "wcu")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # environment
    env: str = "tabular"
    env_seed: int = 0
    n_states: int = 20
    n_agents: int = 3
    n_actions: int = 4
    term_prob: float = 0.02
    horizon: int = 400
    coupling: float = 0.1
    concentration: float = 0.5
    reward_gap: float = 0.5
    grid_size: int = 5
    capture_radius: int = 0
    noise: str = "uniform"
    noise_lo: float = 0.0
    noise_hi: float = 0.02
    noise_mean: float = 0.0
    noise_std: float = 0.0
    # method
    method: str = "demar"
    H: int = 1
    N_H: int = 1
    K: int = 1
    N_K: int = 1
    alpha_reg: float = 0.0
    k_hist: int = 3
    beta: float = 0.05
    omega: float = 5.0
    alpha_sm: float = 0.1
    wcu_w: float = 0.75
    # learning
    gamma: float = 0.99
    optimizer: str = "rmsprop"
    lr: float = 5e-3
    lr_final_frac: float = 0.05
    grad_clip: float = 10.0
    target_period: int = 20
    batch_size: int = 32
    buffer_size: int = 50000
    learning_starts: int = 500
    train_every: int = 2
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_steps: int = 10000
    # networks
    agent_hidden: tuple = (32,)
    hyper_hidden: int = 16
    mixer: str = "qmix"
    mixing_dim: int = 8
    elu_alpha: float = 1.0
    # schedule
    total_steps: int = 50000
    eval_interval: int = 5000
    eval_episodes: int = 50
    seed: int = 0
    # sweep
    r_max: float = 10.0
    sweep_alpha_reg: tuple = (0.0, 0.002, 0.02)
    sweep_steps: int = 10000
    sweep_h: tuple = ("1:1", "2:2")
    sweep_k: tuple = ("1:1", "4:2")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be > 0")
        if self.env not in ("tabular", "pursuit"):
            raise ConfigError(f"unknown env {self.env!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.optimizer not in ("rmsprop", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.mixer not in ("qmix", "linear"):
            raise ConfigError(f"unknown mixer {self.mixer!r}")
        for name in ("eval_interval", "eval_episodes", "batch_size", "buffer_size", "train_every", "target_period",
                     "sweep_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.lr_final_frac <= 1.0:
            raise ConfigError("lr_final_frac must lie in [0, 1]")
        if self.method == "qmix" and not (self.H == self.N_H == self.K == self.N_K == 1 and self.alpha_reg == 0):
            raise ConfigError("method qmix is the plain reference learner; ensemble keys must stay at 1, alpha_reg at 0")
        try:
            self.noise_spec()
            self.ensemble_config()
            self.target_spec()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # --- derived objects ---
    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(self.noise, lo=self.noise_lo, hi=self.noise_hi, mean=self.noise_mean, std=self.noise_std)

    def make_env(self):
        if self.env == "tabular":
            return TabularGame(self.n_states, self.n_agents, self.n_actions, self.gamma, self.env_seed,
                               self.term_prob, self.horizon, self.coupling, self.concentration, self.reward_gap)
        return GridPursuit(self.grid_size, self.n_agents, self.capture_radius, self.horizon, self.gamma)

    def ensemble_config(self) -> EnsembleConfig:
        return EnsembleConfig(self.H, self.N_H, self.K, self.N_K, self.alpha_reg, self.gamma, self.lr,
                              self.target_period)

    def dims(self, env) -> Dims:
        kind = QmixElu(self.mixing_dim, self.elu_alpha) if self.mixer == "qmix" else Linear()
        return Dims(env.n_agents, env.obs_dim, env.state_dim, env.n_actions, tuple(self.agent_hidden),
                    self.hyper_hidden, kind)

    def target_spec(self) -> T.TargetSpec | None:
        return {
            "demar": lambda: T.Demar(),
            "qmix": lambda: None,
            "vanilla": lambda: T.VanillaMax(),
            "td3": lambda: T.Td3Twin(),
            "subavg": lambda: T.SubAvg(self.k_hist),
            "sqmix": lambda: T.SoftmaxSubset(self.beta),
            "sm2": lambda: T.SoftMellowmax(self.omega, self.alpha_sm),
            "wcu": lambda: T.WcuWeighted(self.wcu_w),
        }[self.method]()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {format_value(v)}")
        return "\n".join(lines) + "\n"


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_tuple(name: str, text: str, default: tuple) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if name == "agent_hidden":
        return tuple(int(p) for p in parts)
    if name == "sweep_alpha_reg":
        return tuple(float(p) for p in parts)
    return tuple(parts)


def parse_value(name: str, text: str):
    if name not in FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    default = FIELDS[name].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return _parse_tuple(name, text, default)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "include":
            values.update(parse_text(read_source(val), val))
            continue
        values[key] = parse_value(key, val)
    return values


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("demar").joinpath("presets").iterdir()
                  if p.name.endswith(".cfg"))


def read_source(ref: str) -> str:
    """Config text from a path, or from a bundled preset by name."""
    path = Path(ref)
    if path.is_file():
        return path.read_text()
    preset = resources.files("demar").joinpath("presets", f"{ref}.cfg")
    if preset.is_file():
        return preset.read_text()
    raise ConfigError(f"no config file or preset named {ref!r}")


def env_overrides(environ: Mapping[str, str]) -> dict:
    out = {}
    lowered = {k.lower(): k for k in FIELDS}
    for key, val in environ.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):]
            name = name if name in FIELDS else lowered.get(name.lower(), name)
            out[name] = parse_value(name, val)
    return out


def load(ref: str | None = None, overrides: Mapping | None = None, environ: Mapping[str, str] | None = None) -> RunConfig:
    values = parse_text(read_source(ref), ref) if ref else {}
    values.update(env_overrides(os.environ if environ is None else environ))
    values.update(overrides or {})
    return RunConfig(**values)
