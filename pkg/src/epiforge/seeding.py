"""Deterministic seed derivation and portable Poisson sampling.

Every stochastic operation in the toolkit draws its seed from a single
global seed through a stable label, so a run is reproducible bit-for-bit
from (config, seed) regardless of execution order.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

_POISSON_INVERSION_CUTOFF = 30.0
_MAX_REJECTION_ROUNDS = 100000


def derive_seed(global_seed: int, label: str) -> int:
    """Derive a 63-bit child seed from a global seed and a stable label."""
    digest = hashlib.sha256(f"{global_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def rng_for(global_seed: int, label: str) -> np.random.Generator:
    """PCG64 generator seeded via derive_seed."""
    return np.random.default_rng(derive_seed(global_seed, label))


def poisson(rng: np.random.Generator, mean: float) -> int:
    """Draw one Poisson variate.

    Uses multiplicative inversion below mean 30 and Hormann's PTRS
    transformed rejection above, so draws depend only on the uniform
    stream and stay identical across platforms.
    """
    if mean < 0:
        raise ValueError(f"Poisson mean must be non-negative, got {mean}")
    if mean == 0.0:
        return 0
    if mean < _POISSON_INVERSION_CUTOFF:
        return _poisson_inversion(rng, mean)
    return _poisson_ptrs(rng, mean)


def _poisson_inversion(rng: np.random.Generator, mean: float) -> int:
    limit = math.exp(-mean)
    k = 0
    prod = rng.random()
    while prod > limit:
        k += 1
        prod *= rng.random()
    return k


def _poisson_ptrs(rng: np.random.Generator, mean: float) -> int:
    # Hormann (1993), algorithm PTRS; valid for mean >= 10.
    log_mean = math.log(mean)
    b = 0.931 + 2.53 * math.sqrt(mean)
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    v_r = 0.9277 - 3.6224 / (b - 2.0)
    for _ in range(_MAX_REJECTION_ROUNDS):
        u = rng.random() - 0.5
        v = rng.random()
        us = 0.5 - abs(u)
        k = math.floor((2.0 * a / us + b) * u + mean + 0.43)
        if us >= 0.07 and v <= v_r:
            return int(k)
        if k < 0 or (us < 0.013 and v > us):
            continue
        if (math.log(v) + math.log(inv_alpha) - math.log(a / (us * us) + b)
                <= k * log_mean - mean - math.lgamma(k + 1.0)):
            return int(k)
    raise RuntimeError("Poisson rejection sampler failed to accept")
