"""Counter-based seed derivation.

Every stream is addressed by a path of integers under the master seed
(``seed -> iteration -> episode -> instance``), so adding episodes or
iterations never reshuffles the draws of existing ones.
"""

from __future__ import annotations

import numpy as np


def derive(seed: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))


def make_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(derive(seed, *path))


def episode_rng(seed: int, iteration: int, episode: int, instance: int = 0) -> np.random.Generator:
    return make_rng(seed, iteration, episode, instance)
