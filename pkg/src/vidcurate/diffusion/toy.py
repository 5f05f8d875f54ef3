"""Frozen stand-ins for the video autoencoder and text encoder.

Latents are area-pooled pixels scaled to [-1, 1]; text embeddings are
fixed Gaussian vectors seeded by a hash of the instruction text.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tokens import LatentVideo


def pool_encode(frames: np.ndarray, grid: tuple[int, int, int], clip_id: str = "") -> LatentVideo:
    """Block-average a (F, H, W, 3) uint8 clip down to grid = (F', H', W')."""
    x = frames.astype(np.float64) / 127.5 - 1.0
    for axis, size in enumerate(grid):
        if size > x.shape[axis]:
            raise ValueError(f"latent axis {axis} ({size}) larger than input ({x.shape[axis]})")
        chunks = np.array_split(x, size, axis=axis)
        x = np.concatenate([c.mean(axis=axis, keepdims=True) for c in chunks], axis=axis)
    return LatentVideo(x, clip_id=clip_id)


def text_embedding(instruction: str, n_tokens: int, dim: int) -> np.ndarray:
    digest = hashlib.sha256(instruction.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal((n_tokens, dim))
