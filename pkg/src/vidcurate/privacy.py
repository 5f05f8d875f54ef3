"""1 FPS sensitive-overlay screening through a vision chat model.

A clip is excluded as soon as one sampled frame is reported to carry
subtitles, watermarks or other identifying overlays.
"""

from __future__ import annotations

import base64
import io
import logging
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .frames import FrameStream
from .manifest import ClipManifest, ClipRecord
from .service import ChatBackend, ResultCache, ServiceError, content_hash

log = logging.getLogger(__name__)

_ANSWER = re.compile(r"^\W*(yes|no)\b", re.I)


class ScanError(ServiceError):
    pass


class SubsetRefused(RuntimeError):
    pass


@dataclass
class PrivacyScan:
    clip_id: str
    sampled_times_s: list[float] = field(default_factory=list)
    frame_flags: list[bool] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "flagged" if any(self.frame_flags) else "clean"


def load_prompt(path: str | Path | None = None) -> str:
    if path:
        return Path(path).read_text(encoding="utf-8").strip()
    return resources.files("vidcurate.data").joinpath("vlm_prompt.txt").read_text(encoding="utf-8").strip()


def sample_timestamps(duration_s: float) -> list[float]:
    """Whole seconds from 0 up to the duration, plus the final instant."""
    if not duration_s > 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    times = [float(s) for s in range(math.floor(duration_s) + 1)]
    if times[-1] != duration_s:
        times.append(float(duration_s))
    return times


def frame_index(t: float, fps: float, frame_count: int) -> int:
    return min(max(math.floor(t * fps + 0.5), 0), frame_count - 1)


def encode_png(frame: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(frame).save(buf, format="PNG")
    return buf.getvalue()


def parse_answer(text: str) -> bool | None:
    m = _ANSWER.match(text or "")
    if not m:
        return None
    return m.group(1).lower() == "yes"


def detect_sensitive(frame: np.ndarray, client: ChatBackend, *, prompt: str | None = None,
                     cache: ResultCache | None = None, max_parse_attempts: int = 2) -> bool:
    prompt = load_prompt() if prompt is None else prompt
    cache = cache or ResultCache(None)
    frame = np.ascontiguousarray(frame, dtype=np.uint8)
    key = content_hash(client.model, content_hash(str(frame.shape), frame.tobytes()), content_hash(prompt))
    hit = cache.get(key)
    if hit is not None:
        return bool(hit["sensitive"])
    image = base64.b64encode(encode_png(frame)).decode("ascii")
    messages = [{"role": "user", "content": [
        {"type": "text", "text": prompt},
        {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{image}"}},
    ]}]
    answer = ""
    for _ in range(max_parse_attempts):
        answer = client.complete(messages)
        flag = parse_answer(answer)
        if flag is not None:
            cache.put(key, {"sensitive": flag, "answer": answer[:200]})
            return flag
    raise ScanError(f"unparseable answer {answer[:80]!r}")


def classify_clip(s: FrameStream, meta: ClipRecord, client: ChatBackend, *, prompt: str | None = None,
                  cache: ResultCache | None = None) -> PrivacyScan:
    """Check sampled frames in time order, stopping at the first flagged one."""
    if not meta.verdicts.curated():
        raise ValueError(f"{meta.clip_id}: privacy screening needs dynamics and resolution pass")
    scan = PrivacyScan(meta.clip_id)
    seen: set[int] = set()
    for t in sample_timestamps(meta.duration_s):
        idx = frame_index(t, s.fps, s.frame_count)
        if idx in seen:
            continue
        seen.add(idx)
        flag = detect_sensitive(s.frames[idx], client, prompt=prompt, cache=cache)
        scan.sampled_times_s.append(t)
        scan.frame_flags.append(flag)
        if flag:
            break
    return scan


def build_privacy_subset(m: ClipManifest, allow_incomplete: bool = False) -> ClipManifest:
    """Clean training pairs only."""
    failed = [r.clip_id for r in m if r.scan_error is not None]
    unscanned = [r.clip_id for r in m if r.is_pair and r.scan_error is None and r.verdicts.privacy == "unknown"]
    if (failed or unscanned) and not allow_incomplete:
        raise SubsetRefused(f"{len(failed)} scans failed and {len(unscanned)} pairs are unscanned; "
                            "pass allow_incomplete to build the subset anyway")
    keep = [r for r in m if r.verdicts.privacy == "pass" and r.split == "train"]
    flagged = sum(1 for r in m if r.verdicts.privacy == "fail")
    log.info("privacy subset: %d kept, %d flagged, %d failed, %d unscanned",
             len(keep), flagged, len(failed), len(unscanned))
    if not keep:
        log.warning("privacy subset is empty")
    return m.with_records(keep, f"privacy-subset: kept={len(keep)} flagged={flagged}")


class MockVisionScreen:
    """Offline stand-in for the vision model: flags frames whose bottom band
    holds a noticeable share of near-white pixels (burned-in subtitles)."""

    model = "mock-vision"

    def __init__(self, band: float = 0.2, white_level: int = 235, min_fraction: float = 0.02):
        self.band = band
        self.white_level = white_level
        self.min_fraction = min_fraction
        self.calls = 0

    def complete(self, messages):
        self.calls += 1
        url = next(part["image_url"]["url"] for part in messages[-1]["content"] if part["type"] == "image_url")
        png = base64.b64decode(url.split(",", 1)[1])
        frame = np.asarray(Image.open(io.BytesIO(png)).convert("RGB"))
        rows = max(1, int(round(frame.shape[0] * self.band)))
        bottom = frame[-rows:]
        white = np.all(bottom >= self.white_level, axis=-1).mean()
        return "Yes, an overlay is visible." if white >= self.min_fraction else "No."
