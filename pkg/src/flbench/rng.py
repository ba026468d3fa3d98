"""Seed derivation and a platform-stable Gamma/Dirichlet sampler.

Every random stream in a run is derived from the single top-level seed by
hashing it together with a tuple of labels, so streams do not depend on the
order in which they are requested (e.g. client scheduling).
"""

from __future__ import annotations

import hashlib
import math

import numpy as np


def derive_seed(seed: int, *labels: object) -> int:
    """Hash ``seed`` and ``labels`` into a 64-bit integer."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(seed: int, *labels: object) -> np.random.Generator:
    """Independent PCG64 generator for the stream named by ``labels``."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *labels)))


def _std_normal(rng: np.random.Generator) -> float:
    # Box-Muller from two uniforms; avoids relying on numpy's ziggurat tables.
    u1 = 1.0 - rng.random()
    u2 = rng.random()
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def gamma_sample(rng: np.random.Generator, shape: float) -> float:
    """Draw from Gamma(shape, 1).

    Marsaglia & Tsang (2000) squeeze method for ``shape >= 1``; for
    ``shape < 1`` the draw for ``shape + 1`` is boosted by ``U ** (1/shape)``.
    Only ``rng.random()`` is consumed, so the result is reproducible wherever
    PCG64 is.
    """
    if shape <= 0:
        raise ValueError(f"gamma shape must be positive, got {shape}")
    if shape < 1.0:
        boost = (1.0 - rng.random()) ** (1.0 / shape)
        return gamma_sample(rng, shape + 1.0) * boost
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = _std_normal(rng)
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = 1.0 - rng.random()
        if u < 1.0 - 0.0331 * x**4:
            return d * v
        if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return d * v


def dirichlet_sample(rng: np.random.Generator, alpha: float, k: int) -> np.ndarray:
    """Symmetric Dirichlet(alpha * 1_k) via normalized Gamma draws."""
    draws = np.array([gamma_sample(rng, alpha) for _ in range(k)], dtype=np.float64)
    total = draws.sum()
    if total <= 0.0 or not np.isfinite(total):
        # all draws underflowed (tiny alpha); fall back to a one-hot on the largest
        out = np.zeros(k)
        out[int(np.argmax(draws))] = 1.0
        return out
    return draws / total
