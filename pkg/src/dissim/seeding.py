"""Counter-based seed derivation.

Every random draw in the package comes from a Philox generator keyed by
(root_seed, *path), where path is a tuple of small integers naming the
consumer (image index, patch index, epoch, ...). Reruns with the same root
seed therefore reproduce bit-for-bit regardless of evaluation order or
worker fan-out: stream identity depends only on the path, never on how many
draws other streams made.
"""

from __future__ import annotations

import numpy as np

__all__ = ["seed_sequence", "rng", "derive_seed"]


def seed_sequence(root_seed: int, *path: int) -> np.random.SeedSequence:
    """SeedSequence for the stream named by (root_seed, *path)."""
    if root_seed < 0:
        raise ValueError("root seed must be nonnegative")
    return np.random.SeedSequence(entropy=int(root_seed), spawn_key=tuple(int(p) for p in path))


def rng(root_seed: int, *path: int) -> np.random.Generator:
    """Philox generator for the stream named by (root_seed, *path)."""
    return np.random.Generator(np.random.Philox(seed_sequence(root_seed, *path)))


def derive_seed(root_seed: int, *path: int) -> int:
    """Derived integer seed in [0, 2**63), e.g. for torch.manual_seed."""
    state = seed_sequence(root_seed, *path).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))
