"""Seeded random streams and dropout masks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError

MASK_KINDS = ("standard", "locked", "embedding_row", "weight_drop")


@dataclass
class RngStream:
    """Reproducible generator keyed by (seed, stream_id) via PCG64."""

    seed: int
    stream_id: int = 0
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence([int(self.seed) & (2**64 - 1), int(self.stream_id)])
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def random(self, shape) -> np.ndarray:
        return self.generator.random(shape)

    def uniform(self, low, high, shape, dtype=np.float32) -> np.ndarray:
        return self.generator.uniform(low, high, shape).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def dropout_mask(kind: str, p: float, shape, rng: RngStream, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout keep mask: Bernoulli(1-p) entries scaled by 1/(1-p).

    ``shape`` is the shape of the tensor being masked. ``locked`` expects
    [B, L, D] and returns a [B, 1, D] mask shared by every time step;
    ``embedding_row`` expects [V, D] and returns a [V, 1] mask dropping whole
    rows; ``standard`` and ``weight_drop`` return a full-shape mask.
    """
    if kind not in MASK_KINDS:
        raise ConfigError(f"unknown dropout kind {kind!r}")
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    shape = tuple(shape)
    if kind == "locked":
        if len(shape) != 3:
            raise ConfigError(f"locked dropout expects [B, L, D], got {shape}")
        shape = (shape[0], 1, shape[2])
    elif kind == "embedding_row":
        shape = (shape[0], 1)
    if p == 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)
