"""Seed derivation.

Every random stream comes from a Philox counter-based generator keyed by the
root seed plus a path of labels (root -> series -> chain -> predictive), so
adding chains or series never perturbs an existing stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

RNG_ALGORITHM = f"numpy.random.Philox/SeedSequence (numpy {np.__version__})"


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("seed path integers must be nonnegative")
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))


def make_rng(seed: int, *path) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(derive_seed_sequence(seed, *path)))


def derive_int(seed: int, *path) -> int:
    """A 63-bit child seed for a labelled sub-task."""
    return int(derive_seed_sequence(seed, *path).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return make_rng(seed, "chain", chain)
