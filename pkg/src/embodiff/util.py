"""Small shared helpers: canonical JSON, hashing, named seed streams."""
from __future__ import annotations

import hashlib
import json

import numpy as np


def canonical_json(obj) -> str:
    """Deterministic JSON text (sorted keys, no whitespace drift)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def canonical_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def stream_seed(root_seed: int, name: str, index: int = 0) -> list[int]:
    """Entropy list for one named substream of a root seed.

    Streams ("data", "init", "train", "eval", "mptd", ...) are independent
    of each other and stable across runs and platforms.
    """
    return [int(root_seed), _name_key(name), int(index)]


def stream_rng(root_seed: int, name: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root_seed, name, index))
