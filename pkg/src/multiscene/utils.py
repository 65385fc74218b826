"""Seeded RNG streams and stable hashing helpers.

All randomness in the package flows through Philox, a counter-based
generator whose output is a pure function of its integer key, so every
derived stream is reproducible across runs and platforms. Streams are
keyed by (seed, tag, *path) so that unrelated subsystems never share or
reorder draws.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

# Stream tags. Append only; renumbering changes every derived stream.
TAG_PARAMS = 1
TAG_SHUFFLE = 2
TAG_ORACLE = 3
TAG_RENDER = 4
TAG_SELECT = 5
TAG_GRADCHECK = 6
TAG_BUNDLE = 7
TAG_TASK_ORDER = 8
TAG_FINETUNE = 9
TAG_TEST_SET = 10


def rng_for(seed: int, *path: int) -> np.random.Generator:
    """Return the Philox stream keyed by (seed, *path)."""
    entropy = [int(seed)] + [int(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def stable_json(obj) -> str:
    """Canonical JSON used for hashing and manifests."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(stable_json(obj).encode("utf-8")).hexdigest()
