import numpy as np

from demar import ensembles as E
from demar.nets import Linear, QmixElu
from demar.replay import Batch


def pin_agent(net, values):
    """Make ``net`` output ``values`` for every observation."""
    w, b = net.body.layers[-1]
    w.value[...] = 0.0
    b.value[...] = values


def pin_linear_mixer(hyper, w, b):
    wl, bl = hyper.heads["w"].layers[-1]
    wl.value[...] = 0.0
    bl.value[...] = w
    wb, bb = hyper.heads["b"].layers[-1]
    wb.value[...] = 0.0
    bb.value[...] = b


def small_dims(n_agents=2, n_actions=3, mixer=None, obs_dim=4, state_dim=5):
    return E.Dims(n_agents=n_agents, obs_dim=obs_dim, state_dim=state_dim, n_actions=n_actions,
                  agent_hidden=(8,), hyper_hidden=6, mixer=mixer or QmixElu(4))


def random_batch(rng, B, dims, done_frac=0.2):
    N, O, S = dims.n_agents, dims.obs_dim, dims.state_dim
    return Batch(
        state=rng.normal(size=(B, S)), obs=rng.normal(size=(B, N, O)),
        actions=rng.integers(0, dims.n_actions, size=(B, N)), reward=rng.normal(size=B),
        next_state=rng.normal(size=(B, S)), next_obs=rng.normal(size=(B, N, O)),
        done=rng.random(B) < done_frac)


def linear_dims(**kw):
    return small_dims(mixer=Linear(), **kw)
