"""Stable seed derivation so every consumer of randomness gets its own stream."""
from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(seed: int, tag: str) -> int:
    """Map (seed, purpose tag) to a 63-bit seed, stable across runs and platforms."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def torch_generator(seed: int, tag: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, tag))
    return gen


def numpy_rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag))
