"""Deterministic seed fan-out.

Every random stream (data shuffling, weight init, gradient-penalty
interpolation, dropout, texture synthesis) gets its own seed derived from a
single root seed and a stream name::

    derive_seed(root, "shuffle/train") == int(sha256(f"{root}:shuffle/train"))[:8 bytes]

so adding a new stream never perturbs the existing ones.
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, stream: str) -> int:
    digest = hashlib.sha256(f"{int(root)}:{stream}".encode()).digest()
    # 63 bits keeps it a valid torch seed.
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def numpy_rng(root: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, stream))


def torch_generator(root: int, stream: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root, stream))
    return g
