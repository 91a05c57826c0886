from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(seed: int, *names: object) -> int:
    """Stable 31-bit seed for a named sub-stream of ``seed``."""
    material = ":".join([str(int(seed)), *(str(n) for n in names)]).encode()
    return int.from_bytes(hashlib.sha256(material).digest()[:4], "big") & 0x7FFFFFFF


def numpy_rng(seed: int, *names: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))


def torch_generator(seed: int, *names: object) -> torch.Generator:
    # CPU generators are mt19937, identical across platforms for a given seed.
    gen = torch.Generator(device="cpu")
    gen.manual_seed(derive_seed(seed, *names))
    return gen
