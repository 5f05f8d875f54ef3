"""Raw RGB24 frame streams: ingestion, bilinear resize, 49-frame sampling.

Interchange format: ``<name>.rgb`` holds concatenated row-major RGB24
frames and ``<name>.json`` holds ``{width, height, fps, frame_count}``.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .atomic import atomic_write_bytes, atomic_write_text

TARGET_WIDTH = 720
TARGET_HEIGHT = 480
TARGET_FRAMES = 49


class FrameFormatError(ValueError):
    pass


@dataclass
class FrameStream:
    """Decoded clip as a uint8 array of shape (F, H, W, 3)."""

    frames: np.ndarray
    fps: float
    clip_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.dtype != np.uint8:
            raise FrameFormatError(f"frames must be uint8, got {self.frames.dtype}")
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise FrameFormatError(f"frames must have shape (F, H, W, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise FrameFormatError("a frame stream needs at least one frame")
        if not self.fps > 0:
            raise FrameFormatError(f"fps must be > 0, got {self.fps}")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def duration_s(self) -> float:
        return self.frame_count / self.fps


@dataclass(frozen=True)
class DecoderCommand:
    """External decoder invocation.

    ``template`` is an argv list (or shell-style string) containing the
    placeholders ``{input}`` and ``{output}``; the decoder must write
    ``{output}.rgb`` and ``{output}.json`` and exit 0.
    """

    template: Sequence[str] | str
    input: str

    def argv(self, output: str) -> list[str]:
        parts = shlex.split(self.template) if isinstance(self.template, str) else list(self.template)
        return [p.format(input=self.input, output=output) for p in parts]


def sidecar_path(raw: str | Path) -> Path:
    return Path(raw).with_suffix(".json")


def read_raw(raw: str | Path, clip_id: str | None = None) -> FrameStream:
    raw = Path(raw)
    meta_path = sidecar_path(raw)
    if not meta_path.exists():
        raise FrameFormatError(f"missing sidecar {meta_path}")
    meta = json.loads(meta_path.read_text())
    w, h, fps = int(meta["width"]), int(meta["height"]), float(meta["fps"])
    stride = 3 * w * h
    size = raw.stat().st_size
    if stride == 0 or size % stride:
        raise FrameFormatError(f"{raw}: {size} bytes is not a multiple of the {stride}-byte frame stride")
    count = size // stride
    if "frame_count" in meta and int(meta["frame_count"]) != count:
        raise FrameFormatError(f"{raw}: sidecar says {meta['frame_count']} frames, payload holds {count}")
    data = np.fromfile(raw, dtype=np.uint8).reshape(count, h, w, 3)
    return FrameStream(data, fps, clip_id or meta.get("clip_id") or raw.stem)


def write_raw(s: FrameStream, raw: str | Path) -> None:
    raw = Path(raw)
    atomic_write_bytes(raw, np.ascontiguousarray(s.frames).tobytes())
    meta = {"width": s.width, "height": s.height, "fps": s.fps, "frame_count": s.frame_count,
            "clip_id": s.clip_id}
    atomic_write_text(sidecar_path(raw), json.dumps(meta, sort_keys=True) + "\n")


def ingest_frames(source: str | Path | DecoderCommand, clip_id: str | None = None) -> FrameStream:
    """Load a raw frame file, or run an external decoder and load what it emits."""
    if not isinstance(source, DecoderCommand):
        return read_raw(source, clip_id)
    with tempfile.TemporaryDirectory(prefix="vidcurate-decode-") as tmp:
        out = str(Path(tmp) / "decoded")
        proc = subprocess.run(source.argv(out), capture_output=True, text=True)
        if proc.returncode != 0:
            raise FrameFormatError(f"decoder exited with {proc.returncode}: {proc.stderr.strip()[-500:]}")
        raw = Path(out + ".rgb")
        if not raw.exists():
            raise FrameFormatError(f"decoder produced no {raw.name}")
        stream = read_raw(raw, clip_id or Path(source.input).stem)
        stream.frames = stream.frames.copy()
        return stream


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    lo = np.floor(x).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, x - lo


def resize_frames(frames: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Bilinear resize of a (F, H, W, C) uint8 stack; aspect ratio is not kept."""
    F, H, W, C = frames.shape
    if (H, W) == (target_h, target_w):
        return frames.copy()
    y0, y1, wy = _axis_weights(H, target_h)
    x0, x1, wx = _axis_weights(W, target_w)
    out = np.empty((F, target_h, target_w, C), dtype=np.uint8)
    wy = wy[:, None, None].astype(np.float32)
    wx = wx[None, :, None].astype(np.float32)
    for i in range(F):  # per-frame keeps peak memory at one float32 frame
        f = frames[i].astype(np.float32)
        rows = f[y0] * (1 - wy) + f[y1] * wy
        val = rows[:, x0] * (1 - wx) + rows[:, x1] * wx
        out[i] = np.clip(np.rint(val), 0, 255).astype(np.uint8)
    return out


def resize_clip(s: FrameStream, target_w: int = TARGET_WIDTH, target_h: int = TARGET_HEIGHT) -> FrameStream:
    if target_w < 1 or target_h < 1:
        raise ValueError(f"target size must be positive, got {target_w}x{target_h}")
    return FrameStream(resize_frames(s.frames, target_w, target_h), s.fps, s.clip_id)


def sample_indices(frame_count: int, target: int = TARGET_FRAMES) -> list[int]:
    """Endpoint-inclusive uniform indices; shorter clips keep every frame."""
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    if frame_count < target:
        return list(range(frame_count))
    return [(i * (frame_count - 1)) // (target - 1) for i in range(target)]


def sample_to_49(s: FrameStream, target: int = TARGET_FRAMES) -> FrameStream:
    """Uniformly pick ``target`` frames, or zero-pad at the end when the clip is shorter."""
    idx = sample_indices(s.frame_count, target)
    picked = s.frames[idx]
    if len(idx) < target:
        pad = np.zeros((target - len(idx),) + s.frames.shape[1:], dtype=np.uint8)
        picked = np.concatenate([picked, pad], axis=0)
    return FrameStream(picked, s.fps, s.clip_id)


def preprocess_clip(s: FrameStream, target_w: int = TARGET_WIDTH, target_h: int = TARGET_HEIGHT,
                    target_frames: int = TARGET_FRAMES) -> FrameStream:
    # sample first so only the kept frames get resized
    return resize_clip(sample_to_49(s, target_frames), target_w, target_h)
