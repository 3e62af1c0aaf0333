"""Sinusoidal encodings of IMU placement labels and sampling frequency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .types import PlacementSet, SamplingFrequency


@dataclass(frozen=True)
class EmbeddingConfig:
    d_model: int = 64
    base: float = 10000.0

    def __post_init__(self):
        if self.d_model < 2 or self.d_model % 2:
            raise InvalidArgumentError(f"d_model must be a positive even integer, got {self.d_model}")
        if self.base <= 1:
            raise InvalidArgumentError(f"base must exceed 1, got {self.base}")


DEFAULT_EMBEDDING = EmbeddingConfig()


def sinusoid_embed(pos, cfg: EmbeddingConfig = DEFAULT_EMBEDDING) -> np.ndarray:
    """Entry ``2k`` is ``sin(pos / base**(2k/d))``, entry ``2k+1`` the matching cosine.

    ``pos`` may be a scalar (returns ``(d_model,)``) or an array (appends an axis).
    """
    pos_arr = np.asarray(pos, dtype=np.float64)
    if np.any(pos_arr < 0):
        raise InvalidArgumentError("positions must be non-negative")
    k = np.arange(cfg.d_model // 2, dtype=np.float64)
    inv_freq = cfg.base ** (-2.0 * k / cfg.d_model)
    angles = pos_arr[..., None] * inv_freq
    out = np.empty(pos_arr.shape + (cfg.d_model,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def embed_placement(z: PlacementSet, cfg: EmbeddingConfig = DEFAULT_EMBEDDING) -> np.ndarray:
    """One embedding row per mounted IMU, ordered by sorted label."""
    return sinusoid_embed(np.asarray(z.labels), cfg)


def embed_frequency(f: SamplingFrequency, cfg: EmbeddingConfig = DEFAULT_EMBEDDING) -> np.ndarray:
    """Embed the frequency's ordinal (5 Hz -> 0, ..., 50 Hz -> 3), not the raw Hz value."""
    return sinusoid_embed(SamplingFrequency.parse(f).index, cfg)
