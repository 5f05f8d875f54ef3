"""Rater score ingestion, realism bands and per-group aggregation."""

from __future__ import annotations

import csv
import json
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

from .atomic import atomic_write_text

CRITERIA = (
    "PhaseMatching",
    "PhaseCompleteness",
    "ConstructionRealism",
    "ConstructionStability",
    "ActionRealism",
    "ActionLogic",
    "ActionEffectiveness",
)
_CRITERION_KEYS = {c.lower(): c for c in CRITERIA}
SCORE_COLUMNS = ("video_id", "phase_label", "rater_id", "criterion", "score")

GroupBy = Literal["criterion", "phase", "criterion_phase"]


class ScoreFileError(ValueError):
    pass


@dataclass(frozen=True)
class RealismBand:
    low_pct: int
    high_pct: int


REALISM_BANDS = {
    0: RealismBand(0, 10),
    1: RealismBand(10, 50),
    2: RealismBand(50, 90),
    3: RealismBand(90, 100),
}


@dataclass(frozen=True)
class ScoreRecord:
    video_id: str
    phase_label: str
    rater_id: str
    criterion: str
    score: int


@dataclass(frozen=True)
class GroupSummary:
    group: tuple[str, ...]
    mean: float
    count: int
    rater_spread: float

    @property
    def label(self) -> str:
        return "/".join(self.group)


def normalize_criterion(name: str) -> str:
    key = re.sub(r"[\s_\-]+", "", name).lower()
    if key not in _CRITERION_KEYS:
        raise ValueError(f"unknown criterion {name!r}")
    return _CRITERION_KEYS[key]


def band_of(score: int) -> RealismBand:
    if isinstance(score, bool) or not isinstance(score, int) or score not in REALISM_BANDS:
        raise ValueError(f"score must be one of 0, 1, 2, 3, got {score!r}")
    return REALISM_BANDS[score]


def parse_scores(path: str | Path) -> list[ScoreRecord]:
    """Read a rater CSV; line numbers in errors count the header as line 1."""
    path = Path(path)
    records: list[ScoreRecord] = []
    seen: dict[tuple[str, str, str], int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(SCORE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ScoreFileError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            line = reader.line_num
            try:
                criterion = normalize_criterion(row["criterion"])
            except ValueError as exc:
                raise ScoreFileError(f"{path}:{line}: {exc}") from None
            raw = row["score"].strip()
            if not re.fullmatch(r"[0-3]", raw):
                raise ScoreFileError(f"{path}:{line}: score {raw!r} outside 0..3")
            rec = ScoreRecord(row["video_id"].strip(), row["phase_label"].strip(),
                              row["rater_id"].strip(), criterion, int(raw))
            key = (rec.video_id, rec.rater_id, rec.criterion)
            if key in seen:
                raise ScoreFileError(f"{path}: duplicate score for {key} on lines {seen[key]} and {line}")
            seen[key] = line
            records.append(rec)
    return records


def _group_key(rec: ScoreRecord, group_by: GroupBy) -> tuple[str, ...]:
    if group_by == "criterion":
        return (rec.criterion,)
    if group_by == "phase":
        return (rec.phase_label,)
    if group_by == "criterion_phase":
        return (rec.criterion, rec.phase_label)
    raise ValueError(f"unknown grouping {group_by!r}")


def _sort_key(group: tuple[str, ...], group_by: GroupBy):
    if group_by == "phase":
        return (0, group[0])
    return (CRITERIA.index(group[0]),) + group[1:]


def aggregate(records: Iterable[ScoreRecord], group_by: GroupBy = "criterion") -> list[GroupSummary]:
    """Mean score per group, with the max-min spread of per-rater means."""
    records = list(records)
    if not records:
        raise ValueError("no score records to aggregate")
    scores: dict[tuple, list[int]] = defaultdict(list)
    by_rater: dict[tuple, dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
    for rec in records:
        key = _group_key(rec, group_by)
        scores[key].append(rec.score)
        by_rater[key][rec.rater_id].append(rec.score)
    out = []
    for key in sorted(scores, key=lambda g: _sort_key(g, group_by)):
        vals = scores[key]
        rater_means = [sum(v) / len(v) for v in by_rater[key].values()]
        out.append(GroupSummary(key, sum(vals) / len(vals), len(vals), max(rater_means) - min(rater_means)))
    return out


def radar_axes(table: Sequence[GroupSummary]) -> list[dict]:
    return [{"axis": row.label, "value": row.mean} for row in table]


def export_radar(table: Sequence[GroupSummary], path: str | Path) -> None:
    atomic_write_text(path, json.dumps(radar_axes(table), indent=2) + "\n")


def load_radar(path: str | Path) -> list[dict]:
    return json.loads(Path(path).read_text(encoding="utf-8"))
