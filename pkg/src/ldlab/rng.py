"""Seed derivation for reproducible, independently streamed randomness.

Every stochastic operation in the package takes an explicit seed. Streams
for concurrent jobs are derived from (seed, name, ...) parts so two jobs
never share a generator state.
"""

import hashlib

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def derive_seed(*parts) -> int:
    """Hash arbitrary parts (ints, strings) into a stable 63-bit seed."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "big") & _MASK63


def torch_generator(*parts) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(derive_seed(*parts))
    return gen


def numpy_generator(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
