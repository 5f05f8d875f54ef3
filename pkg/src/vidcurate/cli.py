"""Command-line entry point: ``vidcurate <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

from . import feedback, metrics
from .config import ConfigError, load_config
from .pipeline import (STAGE_ORDER, StageError, make_services, record_metric, render_report_text,
                       run_stage_cmd, write_report)
from .privacy import SubsetRefused
from .service import ServiceError

log = logging.getLogger("vidcurate")


def _stage_cmd(args) -> int:
    cfg = load_config(args.config)
    services = make_services(cfg, mock=True if args.mock else None)
    stages = STAGE_ORDER if args.command == "run" else (args.command,)
    for stage in stages:
        _, report = run_stage_cmd(stage, cfg, services)
        print(json.dumps(report.to_json(), sort_keys=True))
    return 0


def _report_cmd(args) -> int:
    report = write_report(load_config(args.config))
    sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n" if args.json
                     else render_report_text(report))
    return 0


def _frechet_cmd(args) -> int:
    real = metrics.read_features(args.real, label="real")
    fake = metrics.read_features(args.synthetic, label="synthetic")
    cfg = load_config(args.config) if args.config else None
    regularizer = args.regularizer if args.regularizer is not None else (
        cfg.metrics.regularizer if cfg else metrics.REGULARIZER)
    res = metrics.frechet_distance(metrics.fit_gaussian(real), metrics.fit_gaussian(fake),
                                   regularizer=regularizer)
    out = {"kind": args.kind, "distance": res.distance, "regularized": res.regularized,
           "epsilon": res.epsilon, "n_real": real.n, "n_synthetic": fake.n, "dim": real.d,
           "real": real.source, "synthetic": fake.source}
    if cfg:
        record_metric(cfg, args.kind, out)
    print(json.dumps(out, sort_keys=True))
    return 0


def _read_pairing(path: str) -> list[tuple[int, int]]:
    with open(path, newline="") as fh:
        return [(int(row["video_row"]), int(row["text_row"])) for row in csv.DictReader(fh)]


def _clipscore_cmd(args) -> int:
    videos = metrics.read_features(args.videos, label="video")
    texts = metrics.read_features(args.texts, label="text")
    pairing = _read_pairing(args.pairing) if args.pairing else None
    cfg = load_config(args.config) if args.config else None
    omega = args.omega if args.omega is not None else (cfg.metrics.omega if cfg else 100.0)
    score = metrics.corpus_clip_score(videos, texts, pairing, omega=omega)
    out = {"clip_score": score, "omega": omega, "pairs": len(pairing) if pairing else videos.n}
    if cfg:
        record_metric(cfg, "clip_score", out)
    print(json.dumps(out, sort_keys=True))
    return 0


def _feedback_cmd(args) -> int:
    records = feedback.parse_scores(args.scores)
    table = feedback.aggregate(records, args.group_by)
    if args.radar:
        feedback.export_radar(table, args.radar)
    rows = [{"group": row.label, "mean": round(row.mean, 4), "count": row.count,
             "rater_spread": round(row.rater_spread, 4)} for row in table]
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        for row in rows:
            print(f"{row['group']:<40} mean={row['mean']:.4f} n={row['count']} spread={row['rater_spread']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidcurate", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in STAGE_ORDER + ("run",):
        help_text = "run every pipeline stage in order" if name == "run" else f"run the {name} stage"
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--mock", action="store_true", help="use offline mock LLM/VLM backends")
        p.set_defaults(func=_stage_cmd)

    p = sub.add_parser("report", help="corpus statistics for the working manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_report_cmd)

    p = sub.add_parser("eval-frechet", help="Fréchet distance between two feature files (FID/FVD)")
    p.add_argument("--real", required=True)
    p.add_argument("--synthetic", required=True)
    p.add_argument("--kind", choices=("fid", "fvd"), default="fid")
    p.add_argument("--regularizer", type=float, help="diagonal loading for near-singular covariances "
                   "(default: metrics.regularizer from --config, else 1e-6)")
    p.add_argument("--config", help="record the result in the run's metrics.json")
    p.set_defaults(func=_frechet_cmd)

    p = sub.add_parser("eval-clipscore", help="mean clamped-cosine score over video/text pairs")
    p.add_argument("--videos", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--pairing", help="CSV with video_row,text_row columns (default: row i with row i)")
    p.add_argument("--omega", type=float, help="score scale (default: metrics.omega from --config, else 100)")
    p.add_argument("--config", help="record the result in the run's metrics.json")
    p.set_defaults(func=_clipscore_cmd)

    p = sub.add_parser("feedback-aggregate", help="aggregate rater scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--group-by", choices=("criterion", "phase", "criterion_phase"), default="criterion")
    p.add_argument("--radar", help="write radar-chart JSON here")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_feedback_cmd)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, StageError, ServiceError, SubsetRefused, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
