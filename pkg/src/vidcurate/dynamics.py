"""Keyframe counting and the dynamics / resolution gates.

The change score between consecutive frames is the mean absolute
difference of their 8-bit HSV values (hue on the 0..179 scale), averaged
over the three channels, the same quantity content-aware shot detectors use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .frames import FrameStream

Gate = Literal["pass", "fail"]


@dataclass(frozen=True)
class DetectorParams:
    content_threshold: float = 27.0
    min_gap_frames: int = 15
    keyframe_upper: int = 100
    keyframe_lower: int = 2
    min_width: int = 720
    min_height: int = 480

    def __post_init__(self):
        if not 0.0 <= self.content_threshold <= 255.0:
            raise ValueError("content_threshold must lie in [0, 255]")
        if self.min_gap_frames < 1:
            raise ValueError("min_gap_frames must be >= 1")
        if not 0 <= self.keyframe_lower <= self.keyframe_upper:
            raise ValueError("need 0 <= keyframe_lower <= keyframe_upper")
        if self.min_width < 1 or self.min_height < 1:
            raise ValueError("minimum resolution must be positive")


def rgb_to_hsv8(frame: np.ndarray) -> np.ndarray:
    """RGB24 -> 8-bit HSV with H in [0, 180), S and V in [0, 255]."""
    rgb = frame.astype(np.float32)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = v - mn
    s = np.where(v > 0, 255.0 * delta / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(v == r, 60.0 * (g - b) / safe,
                 np.where(v == g, 120.0 + 60.0 * (b - r) / safe, 240.0 + 60.0 * (r - g) / safe))
    h = np.where(delta > 0, h, 0.0)
    h = np.where(h < 0, h + 360.0, h)
    hsv = np.stack([np.rint(h / 2.0) % 180, np.rint(s), v], axis=-1)
    return hsv.astype(np.uint8)


def _score_hsv(a: np.ndarray, b: np.ndarray) -> float:
    diff = np.abs(a.astype(np.int16) - b.astype(np.int16))
    return float(diff.reshape(-1, 3).mean(axis=0).mean())


def content_score(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return _score_hsv(rgb_to_hsv8(a), rgb_to_hsv8(b))


def detect_keyframes(s: FrameStream, p: DetectorParams = DetectorParams()) -> list[int]:
    """Frame 0, plus every frame whose change score exceeds the threshold
    at least ``min_gap_frames`` after the previous keyframe."""
    keyframes = [0]
    prev = rgb_to_hsv8(s.frames[0])
    for i in range(1, s.frame_count):
        cur = rgb_to_hsv8(s.frames[i])
        if i - keyframes[-1] >= p.min_gap_frames and _score_hsv(prev, cur) > p.content_threshold:
            keyframes.append(i)
        prev = cur
    return keyframes


def dynamics_verdict(k: int, p: DetectorParams = DetectorParams()) -> Gate:
    if k < 0:
        raise ValueError("keyframe count must be non-negative")
    return "pass" if p.keyframe_lower <= k <= p.keyframe_upper else "fail"


def resolution_verdict(w: int, h: int, p: DetectorParams = DetectorParams()) -> Gate:
    if w < 1 or h < 1:
        raise ValueError("width and height must be positive")
    return "pass" if w >= p.min_width and h >= p.min_height else "fail"
