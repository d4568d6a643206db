"""Named, reproducible random streams.

Every consumer of randomness asks for a stream by ``(purpose, index)``. The
stream is a Philox (counter-based) generator keyed from the master seed and a
stable hash of the name, so adding or removing one consumer never shifts the
numbers another consumer sees.
"""

from __future__ import annotations

import hashlib

import numpy as np

ENV_DYNAMICS = "env-dynamics"
ENV_NOISE = "env-noise"
EXPLORE = "explore"
REPLAY = "replay"
SUBSETS = "subsets"
EVAL = "eval"


def _name_words(purpose: str, index: int) -> list[int]:
    digest = hashlib.sha256(f"{purpose}#{index}".encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def stream(master_seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Return the generator for ``purpose`` (and ``index``) under ``master_seed``."""
    if master_seed < 0:
        raise ValueError(f"master seed must be non-negative, got {master_seed}")
    lo, hi = master_seed & 0xFFFFFFFF, (master_seed >> 32) & 0xFFFFFFFF
    seq = np.random.SeedSequence([lo, hi, *_name_words(purpose, index)])
    return np.random.Generator(np.random.Philox(seq))


def init_stream(master_seed: int, net_id: str) -> np.random.Generator:
    return stream(master_seed, f"init:{net_id}")


def shard_stream(master_seed: int, shard: int) -> np.random.Generator:
    return stream(master_seed, "oracle:shard", shard)
