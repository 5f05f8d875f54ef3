"""Latent grids and their token-sequence views."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

TokenKind = Literal["vision", "text", "concatenated"]


@dataclass
class LatentVideo:
    """A latent grid of shape (F, H, W, C)."""

    grid: np.ndarray
    clip_id: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 4 or min(self.grid.shape) < 1:
            raise ValueError(f"latent grid must be 4-D with positive dims, got {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("latent grid has non-finite entries")


@dataclass
class TokenSequence:
    """A (length, D) token matrix.

    For concatenated sequences ``boundary`` is the number of leading
    text tokens; the vision block is ``tokens[boundary:]``.
    """

    tokens: np.ndarray
    kind: TokenKind = "vision"
    boundary: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be 2-D (length, D), got shape {self.tokens.shape}")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    @property
    def vision(self) -> np.ndarray:
        return self.tokens[self.boundary:] if self.kind == "concatenated" else self.tokens

    @property
    def text(self) -> np.ndarray:
        return self.tokens[: self.boundary] if self.kind == "concatenated" else self.tokens[:0]


def _check_rates(shape, q: int, p: int) -> None:
    F, H, W, _ = shape
    for axis, size, rate in (("F", F, q), ("H", H, p), ("W", W, p)):
        if rate < 1 or size % rate:
            raise ValueError(f"axis {axis}={size} is not divisible by rate {rate}")


def patchify(v: LatentVideo, q: int, p: int) -> TokenSequence:
    """Group q x p x p cells into tokens of dimension q*p*p*C.

    Tokens are ordered time-major, then row-major over the spatial grid.
    """
    F, H, W, C = v.grid.shape
    _check_rates(v.grid.shape, q, p)
    x = v.grid.reshape(F // q, q, H // p, p, W // p, p, C)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)
    return TokenSequence(x.reshape((F // q) * (H // p) * (W // p), q * p * p * C), kind="vision")


def unpatchify(t: TokenSequence, shape: tuple[int, int, int, int], q: int, p: int,
               clip_id: str = "") -> LatentVideo:
    F, H, W, C = shape
    _check_rates(shape, q, p)
    length = (F // q) * (H // p) * (W // p)
    dim = q * p * p * C
    tokens = t.vision
    if tokens.shape != (length, dim):
        raise ValueError(f"token block {tokens.shape} inconsistent with shape {shape} at q={q}, p={p}; "
                         f"expected {(length, dim)}")
    x = tokens.reshape(F // q, H // p, W // p, q, p, p, C)
    x = x.transpose(0, 3, 1, 4, 2, 5, 6)
    return LatentVideo(x.reshape(F, H, W, C), clip_id=clip_id)


def concat_text(vision: TokenSequence, text: TokenSequence) -> TokenSequence:
    """Prepend text tokens to the vision block."""
    if text.length and vision.dim != text.dim:
        raise ValueError(f"dimension mismatch: vision D={vision.dim}, text D={text.dim}")
    if text.length == 0:
        return TokenSequence(vision.vision.copy(), kind="concatenated", boundary=0)
    return TokenSequence(np.concatenate([text.tokens, vision.vision], axis=0),
                         kind="concatenated", boundary=text.length)


def split_concat(seq: TokenSequence) -> tuple[TokenSequence, TokenSequence]:
    """Inverse of concat_text: returns (vision, text)."""
    if seq.kind != "concatenated":
        raise ValueError("sequence is not concatenated")
    return (TokenSequence(seq.vision.copy(), kind="vision"),
            TokenSequence(seq.text.copy(), kind="text"))
