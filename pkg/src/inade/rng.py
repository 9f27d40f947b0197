"""Deterministic seed derivation for named sub-streams."""

from __future__ import annotations

import numpy as np
import torch


def derived_seed(root_seed: int, *key: int) -> int:
    """Child seed for a (root, key...) stream, stable across runs."""
    seq = np.random.SeedSequence(entropy=int(root_seed), spawn_key=tuple(int(k) for k in key))
    return int(seq.generate_state(1)[0])


def torch_generator(root_seed: int, *key: int) -> torch.Generator:
    """CPU generator seeded from a derived seed."""
    gen = torch.Generator()
    gen.manual_seed(derived_seed(root_seed, *key) if key else int(root_seed))
    return gen
