"""Stage-by-stage corpus pipeline with resumable, atomic manifest updates.

Stages run in a fixed order; each one skips records that already carry
its annotation, so rerunning a finished stage is a no-op and a crashed
stage picks up from its last checkpoint.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from .atomic import atomic_write_text, stale_temp_files
from .config import PipelineConfig
from .diffusion.denoiser import MLPDenoiser
from .diffusion.schedule import build_schedule
from .diffusion.tokens import patchify
from .diffusion.toy import pool_encode, text_embedding
from .diffusion.training import (ToyPairSampler, evaluate_loss, run_progressive,
                                 write_loss_trace)
from .dynamics import detect_keyframes, dynamics_verdict, resolution_verdict
from .frames import ingest_frames, preprocess_clip, read_raw, write_raw
from .manifest import (ClipManifest, ClipRecord, annotate, load_manifest, save_manifest,
                       set_verdict, split_manifest)
from .privacy import MockVisionScreen, ScanError, build_privacy_subset, classify_clip, load_prompt
from .refine import MockRefiner, RefinementFailed, load_blocklist, load_directive, load_exemplars, refine_caption
from .service import ChatBackend, ChatClient, Endpoint, ResultCache, Throttle

log = logging.getLogger(__name__)

STAGE_ORDER = ("curate", "refine", "privacy-scan", "preprocess", "split", "tune-toy")

# Headline corpus statistics of the full-scale run, echoed in reports for comparison.
REFERENCE_CORPUS = {
    "pairs": 162185,
    "source_videos": 9819,
    "mean_duration_s": 5.54,
    "privacy_clean_train_pairs": 28175,
    "train_fraction": 0.8,
}


class StageError(RuntimeError):
    pass


class MissingPrerequisite(StageError):
    pass


@dataclass
class StageReport:
    stage: str
    processed: int = 0
    passed: int = 0
    failed: int = 0
    skipped: int = 0
    recovered_partial_writes: int = 0
    notes: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class Services:
    refiner: ChatBackend
    vision: ChatBackend
    throttle: Throttle


def make_services(cfg: PipelineConfig, mock: bool | None = None) -> Services:
    mock = cfg.mock_services if mock is None else mock
    throttle = Throttle(cfg.refiner.max_in_flight, cfg.refiner.min_interval_s)
    if mock:
        return Services(MockRefiner(load_blocklist(cfg.refiner.blocklist)), MockVisionScreen(), throttle)
    llm = Endpoint.from_env("OPHORA_LLM", cfg.refiner.model, url=cfg.refiner.url or None)
    vlm = Endpoint.from_env("OPHORA_VLM", cfg.privacy.model, url=cfg.privacy.url or None)
    return Services(ChatClient(llm, throttle=throttle), ChatClient(vlm, throttle=throttle), throttle)


def _completion_note(stage: str) -> str:
    return f"{stage}: complete"


def completed_stages(m: ClipManifest) -> set[str]:
    return {s for s in STAGE_ORDER if _completion_note(s) in m.provenance}


def _frame_path(cfg: PipelineConfig, clip_id: str) -> Path:
    return cfg.paths.frame_store / f"{clip_id}.rgb"


def _load_working(cfg: PipelineConfig, stage: str, report: StageReport) -> ClipManifest:
    stale = stale_temp_files(cfg.manifest_path)
    for tmp in stale:
        log.warning("removing partial write %s left by an interrupted run", tmp)
        tmp.unlink()
    report.recovered_partial_writes = len(stale)
    if cfg.manifest_path.exists():
        m = load_manifest(cfg.manifest_path)
    elif stage == "curate":
        m = load_manifest(cfg.paths.input_manifest)
    else:
        raise MissingPrerequisite(f"{stage}: no working manifest at {cfg.manifest_path}; run curate first")
    idx = STAGE_ORDER.index(stage)
    if idx > 0:
        need = STAGE_ORDER[idx - 1]
        if need not in completed_stages(m):
            raise MissingPrerequisite(f"{stage} requires the {need} stage to be complete")
    return m


def _merge(m: ClipManifest, updated: dict[str, ClipRecord], note: str | None = None) -> ClipManifest:
    return m.with_records([updated.get(r.clip_id, r) for r in m.records], note)


def _finish(cfg: PipelineConfig, m: ClipManifest, stage: str, report: StageReport) -> ClipManifest:
    note = _completion_note(stage)
    if note not in m.provenance:
        m = m.with_records(m.records, note)
    save_manifest(m, cfg.manifest_path)
    atomic_write_text(cfg.paths.output_dir / "stages" / f"{stage}.report.json",
                      json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    return m


def _map_checkpointed(items: list, fn: Callable, workers: int, every: int,
                      on_result: Callable, checkpoint: Callable[[], None]) -> None:
    """Apply fn in parallel, consume results in input order, checkpoint every ``every`` results."""
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for n, result in enumerate(pool.map(fn, items), start=1):
            on_result(result)
            if every and n % every == 0:
                checkpoint()


def _curate(cfg: PipelineConfig, m: ClipManifest, report: StageReport) -> ClipManifest:
    todo = [r for r in m if r.verdicts.dynamics == "unknown" or r.verdicts.resolution == "unknown"]
    report.skipped = len(m) - len(todo)
    keyframes: dict[str, list[int]] = {}

    def work(rec: ClipRecord):
        stream = ingest_frames(_frame_path(cfg, rec.clip_id), rec.clip_id)
        return rec, detect_keyframes(stream, cfg.detector)

    updated = {}

    def collect(result):
        rec, kf = result
        keyframes[rec.clip_id] = kf
        rec = set_verdict(rec, "resolution", resolution_verdict(rec.width, rec.height, cfg.detector))
        rec = set_verdict(rec, "dynamics", dynamics_verdict(len(kf), cfg.detector))
        rec = annotate(rec, keyframe_count=len(kf))
        updated[rec.clip_id] = rec

    _map_checkpointed(todo, work, cfg.workers, 0, collect, lambda: None)
    report.processed = len(todo)
    report.passed = sum(1 for r in updated.values() if r.verdicts.curated())
    report.failed = report.processed - report.passed
    _write_keyframe_csv(cfg, keyframes)
    return _merge(m, updated)


def _write_keyframe_csv(cfg: PipelineConfig, keyframes: dict[str, list[int]]) -> None:
    path = cfg.paths.output_dir / "stages" / "curate.keyframes.csv"
    rows: dict[str, str] = {}
    if path.exists():
        for line in path.read_text().splitlines()[1:]:
            cid, _, idx = line.partition(",")
            rows[cid] = idx
    rows.update({cid: " ".join(map(str, kf)) for cid, kf in keyframes.items()})
    body = "".join(f"{cid},{rows[cid]}\n" for cid in sorted(rows))
    atomic_write_text(path, "clip_id,keyframes\n" + body)


def _refine(cfg: PipelineConfig, m: ClipManifest, report: StageReport, services: Services) -> ClipManifest:
    todo = [r for r in m if r.verdicts.curated() and r.instruction is None and r.refine_error is None]
    report.skipped = sum(1 for r in m if r.verdicts.curated()) - len(todo)
    exemplars = load_exemplars(cfg.refiner.exemplars)
    blocklist = load_blocklist(cfg.refiner.blocklist)
    directive = load_directive(cfg.refiner.directive)
    cache = ResultCache(cfg.paths.cache_dir / "refine")
    updated: dict[str, ClipRecord] = {}

    def work(rec: ClipRecord):
        try:
            res = refine_caption(rec.caption, services.refiner, clip_id=rec.clip_id, exemplars=exemplars,
                                 directive=directive, cache=cache, blocklist=blocklist)
            return annotate(rec, instruction=res.instruction)
        except RefinementFailed as exc:
            return annotate(rec, refine_error=exc.reason)

    def collect(rec: ClipRecord):
        updated[rec.clip_id] = rec

    def checkpoint():
        save_manifest(_merge(m, updated), cfg.manifest_path)

    _map_checkpointed(todo, work, cfg.refiner.max_in_flight, cfg.refiner.checkpoint_every, collect, checkpoint)
    report.processed = len(todo)
    report.passed = sum(1 for r in updated.values() if r.instruction is not None)
    report.failed = report.processed - report.passed
    return _merge(m, updated)


def _privacy(cfg: PipelineConfig, m: ClipManifest, report: StageReport, services: Services) -> ClipManifest:
    pairs = [r for r in m if r.is_pair]
    todo = [r for r in pairs if r.verdicts.privacy == "unknown" and r.scan_error is None]
    report.skipped = len(pairs) - len(todo)
    prompt = load_prompt(cfg.privacy.prompt)
    cache = ResultCache(cfg.paths.cache_dir / "privacy")
    updated: dict[str, ClipRecord] = {}
    calls = {"frames_checked": 0}

    def work(rec: ClipRecord):
        stream = ingest_frames(_frame_path(cfg, rec.clip_id), rec.clip_id)
        try:
            scan = classify_clip(stream, rec, services.vision, prompt=prompt, cache=cache)
        except ScanError as exc:
            return annotate(rec, scan_error=str(exc)), 0
        verdict = "pass" if scan.verdict == "clean" else "fail"
        return set_verdict(rec, "privacy", verdict), len(scan.frame_flags)

    def collect(result):
        rec, n = result
        updated[rec.clip_id] = rec
        calls["frames_checked"] += n

    def checkpoint():
        save_manifest(_merge(m, updated), cfg.manifest_path)

    _map_checkpointed(todo, work, cfg.workers, cfg.refiner.checkpoint_every, collect, checkpoint)
    report.processed = len(todo)
    report.passed = sum(1 for r in updated.values() if r.verdicts.privacy == "pass")
    report.failed = sum(1 for r in updated.values() if r.verdicts.privacy == "fail")
    report.notes = {**calls, "scan_failed": sum(1 for r in updated.values() if r.scan_error)}
    return _merge(m, updated)


def _preprocess(cfg: PipelineConfig, m: ClipManifest, report: StageReport) -> ClipManifest:
    out_dir = cfg.paths.output_dir / "preprocessed"
    pairs = [r for r in m if r.is_pair]
    todo = [r for r in pairs if r.preprocessed is None or not (cfg.paths.output_dir / r.preprocessed).exists()]
    report.skipped = len(pairs) - len(todo)
    pp = cfg.preprocess

    def work(rec: ClipRecord):
        stream = ingest_frames(_frame_path(cfg, rec.clip_id), rec.clip_id)
        out = preprocess_clip(stream, pp.width, pp.height, pp.frames)
        write_raw(out, out_dir / f"{rec.clip_id}.rgb")
        return annotate(rec, preprocessed=f"preprocessed/{rec.clip_id}.rgb")

    updated: dict[str, ClipRecord] = {}
    _map_checkpointed(todo, work, cfg.workers, 0, lambda r: updated.__setitem__(r.clip_id, r), lambda: None)
    report.processed = report.passed = len(todo)
    report.notes = {"width": pp.width, "height": pp.height, "frames": pp.frames}
    return _merge(m, updated)


def _split(cfg: PipelineConfig, m: ClipManifest, report: StageReport) -> ClipManifest:
    pairs = ClipManifest(tuple(r for r in m if r.is_pair))
    report.skipped = sum(1 for r in pairs if r.split is not None)
    split = split_manifest(pairs, cfg.split.train_fraction, cfg.seed, cfg.split.group_by_source)
    m = _merge(m, split.by_id())
    subset = build_privacy_subset(m, allow_incomplete=cfg.privacy.allow_incomplete)
    save_manifest(subset, cfg.subset_path)
    report.processed = len(pairs)
    report.passed = sum(1 for r in split if r.split == "train")
    report.failed = sum(1 for r in split if r.split == "test")
    report.notes = {"train": report.passed, "test": report.failed, "privacy_subset": len(subset)}
    return m


def _toy_sampler(cfg: PipelineConfig, records: Iterable[ClipRecord]) -> ToyPairSampler:
    ts = cfg.tune
    vision, text = [], []
    for rec in records:
        stream = read_raw(cfg.paths.output_dir / rec.preprocessed, rec.clip_id)
        latent = pool_encode(stream.frames, (ts.latent_frames, ts.latent_height, ts.latent_width), rec.clip_id)
        tokens = patchify(latent, ts.q, ts.p).tokens
        vision.append(tokens)
        text.append(text_embedding(rec.instruction, ts.text_tokens, tokens.shape[1]))
    return ToyPairSampler(vision, text)


def _tune(cfg: PipelineConfig, m: ClipManifest, report: StageReport) -> ClipManifest:
    out_dir = cfg.paths.output_dir / "tune"
    summary_path = out_dir / "summary.json"
    if summary_path.exists():
        report.skipped = 1
        return m
    train = [r for r in m if r.split == "train" and r.preprocessed]
    subset = load_manifest(cfg.subset_path)
    clean = [r for r in subset if r.preprocessed]
    if not train or not clean:
        raise StageError(f"tune-toy needs training pairs ({len(train)}) and privacy-clean pairs ({len(clean)})")
    data1, data2 = _toy_sampler(cfg, train), _toy_sampler(cfg, clean)
    ts = cfg.tune
    schedule = build_schedule(ts.T)
    dim = data1.vision[0].shape[1]
    denoiser = MLPDenoiser(dim, hidden=ts.hidden, seed=cfg.seed)
    initial = {"all": evaluate_loss(denoiser, denoiser.theta, data1, schedule, seed=cfg.seed),
               "clean": evaluate_loss(denoiser, denoiser.theta, data2, schedule, seed=cfg.seed)}
    res = run_progressive(ts.transfer_pretrain, ts.privacy_finetune, denoiser, data1, data2,
                          np.random.default_rng(cfg.seed), schedule, checkpoint_dir=out_dir)
    final = {"all": evaluate_loss(denoiser, res.theta, data1, schedule, seed=cfg.seed),
             "clean": evaluate_loss(denoiser, res.theta, data2, schedule, seed=cfg.seed)}
    write_loss_trace(out_dir / "loss_trace.csv", res.trace)
    summary = {"initial_eval_loss": initial, "final_eval_loss": final, "token_dim": dim,
               "tokens": int(data1.vision[0].shape[0]), "train_pairs": len(train), "clean_pairs": len(clean),
               "iterations": {ts.transfer_pretrain.name: ts.transfer_pretrain.iterations,
                              ts.privacy_finetune.name: ts.privacy_finetune.iterations}}
    atomic_write_text(summary_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    report.processed = 1
    report.notes = summary
    return m


def run_stage_cmd(stage: str, cfg: PipelineConfig, services: Services | None = None
                  ) -> tuple[ClipManifest, StageReport]:
    if stage not in STAGE_ORDER:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGE_ORDER}")
    report = StageReport(stage)
    m = _load_working(cfg, stage, report)
    if stage in ("refine", "privacy-scan") and services is None:
        services = make_services(cfg)
    if stage == "curate":
        m = _curate(cfg, m, report)
    elif stage == "refine":
        m = _refine(cfg, m, report, services)
    elif stage == "privacy-scan":
        m = _privacy(cfg, m, report, services)
    elif stage == "preprocess":
        m = _preprocess(cfg, m, report)
    elif stage == "split":
        m = _split(cfg, m, report)
    elif stage == "tune-toy":
        m = _tune(cfg, m, report)
    m = _finish(cfg, m, stage, report)
    log.info("%s: processed=%d passed=%d failed=%d skipped=%d", stage, report.processed,
             report.passed, report.failed, report.skipped)
    return m, report


def run_all(cfg: PipelineConfig, services: Services | None = None, stages: Iterable[str] = STAGE_ORDER):
    services = services or make_services(cfg)
    return [run_stage_cmd(s, cfg, services)[1] for s in stages]


def _counts(m: ClipManifest, stage: str) -> dict[str, int]:
    out = {"pass": 0, "fail": 0, "unknown": 0}
    for r in m:
        out[getattr(r.verdicts, stage)] += 1
    return out


def build_report(cfg: PipelineConfig) -> dict[str, Any]:
    m = load_manifest(cfg.manifest_path) if cfg.manifest_path.exists() else ClipManifest()
    pairs = [r for r in m if r.is_pair]
    report: dict[str, Any] = {
        "records": len(m),
        "mean_duration_s": round(float(np.mean([r.duration_s for r in m])), 4) if len(m) else 0.0,
        "verdicts": {s: _counts(m, s) for s in ("dynamics", "resolution", "privacy")},
        "pairs": len(pairs),
        "pair_mean_duration_s": round(float(np.mean([r.duration_s for r in pairs])), 4) if pairs else 0.0,
        "refine_failed": sum(1 for r in m if r.refine_error is not None),
        "scan_failed": sum(1 for r in m if r.scan_error is not None),
        "split": {"train": sum(1 for r in m if r.split == "train"),
                  "test": sum(1 for r in m if r.split == "test")},
        "privacy_subset": len(load_manifest(cfg.subset_path)) if cfg.subset_path.exists() else 0,
        "stages_complete": [s for s in STAGE_ORDER if s in completed_stages(m)],
        "reference": dict(REFERENCE_CORPUS),
    }
    metrics_path = cfg.paths.output_dir / "metrics.json"
    if metrics_path.exists():
        report["metrics"] = json.loads(metrics_path.read_text())
    tune_path = cfg.paths.output_dir / "tune" / "summary.json"
    if tune_path.exists():
        tune = json.loads(tune_path.read_text())
        report["tune"] = {"initial_eval_loss": tune["initial_eval_loss"], "final_eval_loss": tune["final_eval_loss"]}
    return report


def flatten(obj: Any, prefix: str = "") -> dict[str, Any]:
    if isinstance(obj, dict):
        out: dict[str, Any] = {}
        for k in sorted(obj):
            out.update(flatten(obj[k], f"{prefix}{k}."))
        return out
    return {prefix[:-1]: obj}


def render_report_text(report: dict[str, Any]) -> str:
    return "".join(f"{k}: {json.dumps(v)}\n" for k, v in flatten(report).items())


def parse_report_text(text: str) -> dict[str, Any]:
    out = {}
    for line in text.splitlines():
        key, _, value = line.partition(": ")
        out[key] = json.loads(value)
    return out


def write_report(cfg: PipelineConfig) -> dict[str, Any]:
    report = build_report(cfg)
    out = cfg.paths.output_dir
    atomic_write_text(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    atomic_write_text(out / "report.txt", render_report_text(report))
    return report


def record_metric(cfg: PipelineConfig, name: str, value: dict[str, Any]) -> None:
    path = cfg.paths.output_dir / "metrics.json"
    metrics = json.loads(path.read_text()) if path.exists() else {}
    metrics[name] = value
    atomic_write_text(path, json.dumps(metrics, indent=2, sort_keys=True) + "\n")
