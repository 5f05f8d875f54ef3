"""Synthetic clips and corpora for the test suite."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from vidcurate.frames import FrameStream, write_raw
from vidcurate.manifest import ClipManifest, ClipRecord, save_manifest

DARK = (20, 30, 40)
BRIGHT = (220, 210, 200)


def solid(n, h, w, color) -> np.ndarray:
    return np.broadcast_to(np.array(color, dtype=np.uint8), (n, h, w, 3)).copy()


def static_clip(n=100, h=48, w=64, color=(90, 120, 60)) -> np.ndarray:
    return solid(n, h, w, color)


def strobe_clip(n=150, h=48, w=64) -> np.ndarray:
    frames = np.zeros((n, h, w, 3), dtype=np.uint8)
    frames[1::2] = 255
    return frames


def cut_clip(cuts, n, h=48, w=64, seed=0) -> np.ndarray:
    """Alternate dark/bright segments with hard cuts at the given frames,
    plus low-amplitude noise so segments are not perfectly flat."""
    rng = np.random.default_rng(seed)
    frames = np.empty((n, h, w, 3), dtype=np.uint8)
    bounds = [0, *cuts, n]
    for k in range(len(bounds) - 1):
        frames[bounds[k]:bounds[k + 1]] = DARK if k % 2 == 0 else BRIGHT
    noise = rng.integers(-3, 4, size=frames.shape)
    return np.clip(frames.astype(int) + noise, 0, 255).astype(np.uint8)


def add_subtitle(frames: np.ndarray, start: int, stop: int) -> np.ndarray:
    out = frames.copy()
    h, w = out.shape[1:3]
    out[start:stop, h - h // 8:h - 2, w // 6:w - w // 6] = 255
    return out


def write_clip(store: Path, clip_id: str, frames: np.ndarray, fps: float) -> None:
    write_raw(FrameStream(frames, fps, clip_id), store / f"{clip_id}.rgb")


CAPTIONS = [
    "Welcome back everyone. The capsulorhexis is completed with Utrata forceps.",
    "A phaco handpiece emulsifies the nucleus in the capsular bag. Subscribe for more.",
    "As you can see, the wound is hydrated. Balanced salt solution is injected into the stroma.",
    "Trypan blue is injected to stain the anterior capsule.",
    "In this video we show our technique. The intraocular lens is injected into the bag.",
]


def build_corpus(root: Path, n_clips=20, h=48, w=64, fps=10.0, seed=0) -> tuple[Path, Path]:
    """Write a small mixed corpus: static, strobing, 3-cut and subtitled clips."""
    rng = np.random.default_rng(seed)
    store = root / "frames"
    store.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_clips):
        cid = f"clip{i:03d}"
        kind = i % 5
        n = 60 + 5 * (i % 4)
        if kind == 0:
            frames = static_clip(n, h, w)
        elif kind == 1:
            frames = strobe_clip(n if n > 101 else 120, h, w)
        else:
            frames = cut_clip([15, 32, 48], n, h, w, seed=i)
        if kind == 4 or i == 2:
            frames = add_subtitle(frames, 20, 31)
        write_clip(store, cid, frames, fps)
        records.append(ClipRecord(
            clip_id=cid, source_video_id=f"src{i // 2:02d}", duration_s=frames.shape[0] / fps,
            width=w, height=h, fps=fps, caption=CAPTIONS[int(rng.integers(len(CAPTIONS)))] + f" Clip {i}.",
        ))
    manifest_path = root / "clips.jsonl"
    save_manifest(ClipManifest(tuple(records)), manifest_path)
    return manifest_path, store


def write_config(root: Path, workers=2, **overrides) -> Path:
    cfg = {
        "seed": 7, "workers": workers, "mock_services": True,
        "paths": {"input_manifest": "clips.jsonl", "frame_store": "frames",
                  "cache_dir": "cache", "output_dir": "run"},
        "detector": {"min_width": 64, "min_height": 48, "min_gap_frames": 1},
        "refiner": {"max_in_flight": 4, "checkpoint_every": 3},
        "preprocess": {"width": 36, "height": 24, "frames": 49},
        "tune": {"T": 100, "num_workers": 4, "hidden": 32,
                 "transfer_pretrain": {"iterations": 60, "batch_size": 8},
                 "privacy_finetune": {"iterations": 20, "batch_size": 8}},
    }
    for key, value in overrides.items():
        cfg[key] = {**cfg.get(key, {}), **value} if isinstance(value, dict) else value
    lines = []
    top = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    lines += [f"{k} = {json.dumps(v)}" for k, v in top.items()]

    def emit(prefix, table):
        scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
        lines.append(f"[{prefix}]")
        lines.extend(f"{k} = {json.dumps(v)}" for k, v in scalars.items())
        for k, v in table.items():
            if isinstance(v, dict):
                emit(f"{prefix}.{k}", v)

    for k, v in cfg.items():
        if isinstance(v, dict):
            emit(k, v)
    path = root / "pipeline.toml"
    path.write_text("\n".join(lines) + "\n")
    return path


def toy_problem(n_pairs=8, dim=4, n_text=2, seed=0):
    """Single-token latents with fixed text context, for convergence runs."""
    from vidcurate.diffusion import ToyPairSampler
    rng = np.random.default_rng(seed)
    vision = [rng.uniform(-1, 1, (1, dim)) for _ in range(n_pairs)]
    text = [rng.standard_normal((n_text, dim)) for _ in range(n_pairs)]
    return ToyPairSampler(vision, text)
