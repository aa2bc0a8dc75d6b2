"""Per-purpose random streams derived from one master seed.

Every stochastic choice in a run draws from a generator built by
:func:`stream`, keyed by ``(master_seed, purpose, *keys)``. The derivation
goes through :class:`numpy.random.SeedSequence`, so it is stable across
processes and platforms (unlike ``hash()``).
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "init": 1,
    "data": 2,
    "partition": 3,
    "minibatch": 4,
    "reparam": 5,
    "recnoise": 6,
    "diagnostics": 7,
}


def derive_seed(master: int, purpose: str, *keys: int) -> int:
    if purpose not in PURPOSES:
        raise KeyError(f"unknown seed purpose {purpose!r}")
    ss = np.random.SeedSequence(entropy=int(master) & (2**64 - 1),
                                spawn_key=(PURPOSES[purpose], *(int(k) for k in keys)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream(master: int, purpose: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, purpose, *keys))
