"""Clip records, JSONL manifest persistence, and train/test splitting.

A manifest file is JSONL: an optional header line ``{"__manifest__": {...}}``
carrying schema_version, provenance and record_count, then one clip per line.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Literal, Optional

from .atomic import atomic_write_text

SCHEMA_VERSION = 1
HEADER_KEY = "__manifest__"

Verdict = Literal["unknown", "pass", "fail"]
VERDICT_VALUES = ("unknown", "pass", "fail")
STAGES = ("dynamics", "resolution", "privacy")
SPLITS = ("train", "test")

_KNOWN_KEYS = {
    "clip_id", "source_video_id", "duration_s", "width", "height", "fps", "caption",
    "instruction", "keyframe_count", "verdicts", "split", "refine_error", "scan_error",
    "preprocessed",
}


class ManifestError(ValueError):
    pass


class VerdictConflict(ValueError):
    pass


@dataclass(frozen=True)
class Verdicts:
    dynamics: Verdict = "unknown"
    resolution: Verdict = "unknown"
    privacy: Verdict = "unknown"

    def curated(self) -> bool:
        return self.dynamics == "pass" and self.resolution == "pass"


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    source_video_id: str
    duration_s: float
    width: int
    height: int
    fps: float
    caption: str
    instruction: Optional[str] = None
    keyframe_count: Optional[int] = None
    verdicts: Verdicts = field(default_factory=Verdicts)
    split: Optional[str] = None
    refine_error: Optional[str] = None
    scan_error: Optional[str] = None
    preprocessed: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not isinstance(self.clip_id, str) or not self.clip_id:
            raise ManifestError("clip_id must be a non-empty string")
        if not self.duration_s > 0:
            raise ManifestError(f"{self.clip_id}: duration_s must be > 0")
        if not self.fps > 0:
            raise ManifestError(f"{self.clip_id}: fps must be > 0")
        if self.width < 1 or self.height < 1:
            raise ManifestError(f"{self.clip_id}: width and height must be positive")
        if self.instruction is not None and not self.instruction.strip():
            raise ManifestError(f"{self.clip_id}: instruction present but blank")
        if self.keyframe_count is not None and self.keyframe_count < 0:
            raise ManifestError(f"{self.clip_id}: keyframe_count must be non-negative")
        for stage in STAGES:
            if getattr(self.verdicts, stage) not in VERDICT_VALUES:
                raise ManifestError(f"{self.clip_id}: bad {stage} verdict {getattr(self.verdicts, stage)!r}")
        if self.verdicts.privacy == "pass" and not self.verdicts.curated():
            raise ManifestError(f"{self.clip_id}: privacy pass requires dynamics and resolution pass")
        if self.split is not None and self.split not in SPLITS:
            raise ManifestError(f"{self.clip_id}: split must be one of {SPLITS}")

    @property
    def is_pair(self) -> bool:
        """Curated clip that also carries a refined instruction."""
        return self.verdicts.curated() and self.instruction is not None

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "clip_id": self.clip_id,
            "source_video_id": self.source_video_id,
            "duration_s": self.duration_s,
            "width": self.width,
            "height": self.height,
            "fps": self.fps,
            "caption": self.caption,
        }
        for key in ("instruction", "keyframe_count"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        out["verdicts"] = {s: getattr(self.verdicts, s) for s in STAGES}
        for key in ("split", "refine_error", "scan_error", "preprocessed"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        out.update(self.extra)
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "ClipRecord":
        missing = {"clip_id", "source_video_id", "duration_s", "width", "height", "fps", "caption"} - obj.keys()
        if missing:
            raise ManifestError(f"missing keys: {sorted(missing)}")
        v = obj.get("verdicts") or {}
        if not isinstance(v, dict) or set(v) - set(STAGES):
            raise ManifestError(f"verdicts must map {STAGES} to {VERDICT_VALUES}")
        rec = cls(
            clip_id=obj["clip_id"],
            source_video_id=obj["source_video_id"],
            duration_s=obj["duration_s"],
            width=obj["width"],
            height=obj["height"],
            fps=obj["fps"],
            caption=obj["caption"],
            instruction=obj.get("instruction"),
            keyframe_count=obj.get("keyframe_count"),
            verdicts=Verdicts(**v),
            split=obj.get("split"),
            refine_error=obj.get("refine_error"),
            scan_error=obj.get("scan_error"),
            preprocessed=obj.get("preprocessed"),
            extra={k: val for k, val in obj.items() if k not in _KNOWN_KEYS},
        )
        rec.validate()
        return rec


def set_verdict(rec: ClipRecord, stage: str, value: Verdict) -> ClipRecord:
    """Return a copy with one stage verdict set; never flips an existing pass/fail."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if value not in VERDICT_VALUES:
        raise ValueError(f"bad verdict {value!r}")
    current = getattr(rec.verdicts, stage)
    if current != "unknown" and current != value:
        raise VerdictConflict(f"{rec.clip_id}: {stage} verdict already {current!r}, refusing {value!r}")
    return replace(rec, verdicts=replace(rec.verdicts, **{stage: value}))


def annotate(rec: ClipRecord, **changes) -> ClipRecord:
    """Fill fields that are still unset. Setting an already-set field to a new value is refused."""
    for key, value in changes.items():
        if key in ("clip_id", "verdicts", "extra"):
            raise ValueError(f"{key} cannot be annotated")
        current = getattr(rec, key)
        if current is not None and current != value:
            raise VerdictConflict(f"{rec.clip_id}: {key} already {current!r}")
    out = replace(rec, **changes)
    out.validate()
    return out


@dataclass(frozen=True)
class ClipManifest:
    records: tuple[ClipRecord, ...] = ()
    schema_version: int = SCHEMA_VERSION
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "provenance", tuple(self.provenance))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self) -> dict[str, ClipRecord]:
        return {r.clip_id: r for r in self.records}

    def with_records(self, records: Iterable[ClipRecord], note: str | None = None) -> "ClipManifest":
        prov = self.provenance + ((note,) if note else ())
        return ClipManifest(tuple(records), self.schema_version, prov)

    def validate(self) -> None:
        seen: dict[str, int] = {}
        for i, rec in enumerate(self.records):
            rec.validate()
            if rec.clip_id in seen:
                raise ManifestError(f"duplicate clip_id {rec.clip_id!r} at records {seen[rec.clip_id]} and {i}")
            seen[rec.clip_id] = i


def load_manifest(path: str | Path) -> ClipManifest:
    path = Path(path)
    records: list[ClipRecord] = []
    seen: dict[str, int] = {}
    header: dict[str, Any] | None = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            if HEADER_KEY in obj:
                if header is not None or records:
                    raise ManifestError(f"{path}:{lineno}: header must be the first line")
                header = obj[HEADER_KEY]
                continue
            try:
                rec = ClipRecord.from_json(obj)
            except (ManifestError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if rec.clip_id in seen:
                raise ManifestError(f"{path}: duplicate clip_id {rec.clip_id!r} on lines "
                                    f"{seen[rec.clip_id]} and {lineno}")
            seen[rec.clip_id] = lineno
            records.append(rec)
    header = header or {}
    version = header.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ManifestError(f"{path}: unsupported schema_version {version}")
    expected = header.get("record_count")
    if expected is not None and expected != len(records):
        raise ManifestError(f"{path}: header promises {expected} records, found {len(records)} "
                            "(partial write?)")
    return ClipManifest(tuple(records), version, tuple(header.get("provenance", ())))


def dumps_manifest(m: ClipManifest) -> str:
    header = {HEADER_KEY: {"schema_version": m.schema_version, "provenance": list(m.provenance),
                           "record_count": len(m.records)}}
    lines = [json.dumps(header, ensure_ascii=False, sort_keys=True)]
    lines += [json.dumps(r.to_json(), ensure_ascii=False) for r in m.records]
    return "\n".join(lines) + "\n"


def save_manifest(m: ClipManifest, path: str | Path) -> None:
    m.validate()
    atomic_write_text(path, dumps_manifest(m))


def train_count(train_fraction: float, units: int) -> int:
    # decimal reading of the fraction, so 0.7 * 10 is 7 and not 6
    return math.floor(Fraction(repr(float(train_fraction))) * units)


def _fisher_yates(items: list, seed: int) -> list:
    rng = random.Random(seed)
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = rng.randrange(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def split_manifest(m: ClipManifest, train_fraction: float = 0.8, seed: int = 0,
                   group_by_source: bool = True) -> ClipManifest:
    """Assign every record to train or test.

    Units (source videos, or clips when ``group_by_source`` is False) are
    sorted, shuffled with a seeded Fisher-Yates pass, and the first
    floor(train_fraction * units) become train.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    uncurated = [r.clip_id for r in m.records if not r.verdicts.curated()]
    if uncurated:
        raise ValueError(f"{len(uncurated)} records have not passed curation, e.g. {uncurated[0]!r}")
    key = (lambda r: r.source_video_id) if group_by_source else (lambda r: r.clip_id)
    units = sorted({key(r) for r in m.records})
    if len(units) < 2:
        raise ValueError(f"need at least 2 split units, got {len(units)}")
    order = _fisher_yates(units, seed)
    train_units = set(order[: train_count(train_fraction, len(units))])
    records = []
    for r in m.records:
        split = "train" if key(r) in train_units else "test"
        records.append(annotate(r, split=split))
    mode = "source" if group_by_source else "clip"
    return m.with_records(records, f"split: fraction={train_fraction} seed={seed} by={mode}")
