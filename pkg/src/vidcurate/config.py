"""Pipeline configuration loaded from TOML.

Every key is optional except ``paths.input_manifest`` and
``paths.frame_store``; relative paths resolve against the config file's
directory. Secrets (API keys) come only from the environment. See the
README for the full key reference.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .diffusion.training import StageConfig
from .dynamics import DetectorParams


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    input_manifest: Path
    frame_store: Path
    cache_dir: Path = Path("cache")
    output_dir: Path = Path("run")


@dataclass
class RefinerSettings:
    model: str = "Qwen2.5-72B-Instruct"
    url: str = ""
    exemplars: Path | None = None
    blocklist: Path | None = None
    directive: Path | None = None
    max_in_flight: int = 8
    min_interval_s: float = 0.0
    checkpoint_every: int = 50


@dataclass
class PrivacySettings:
    model: str = "Qwen2.5-VL-72B-Instruct"
    url: str = ""
    prompt: Path | None = None
    allow_incomplete: bool = False


@dataclass
class PreprocessSettings:
    width: int = 720
    height: int = 480
    frames: int = 49


@dataclass
class SplitSettings:
    train_fraction: float = 0.8
    group_by_source: bool = True


@dataclass
class TuneSettings:
    T: int = 1000
    num_workers: int = 4
    hidden: int = 64
    latent_frames: int = 4
    latent_height: int = 4
    latent_width: int = 6
    q: int = 2
    p: int = 2
    text_tokens: int = 4
    transfer_pretrain: StageConfig = field(
        default_factory=lambda: StageConfig("transfer_pretrain", learning_rate=1e-2, batch_size=16,
                                            iterations=500, num_workers=4))
    privacy_finetune: StageConfig = field(
        default_factory=lambda: StageConfig("privacy_finetune", learning_rate=5e-3, batch_size=16,
                                            iterations=100, num_workers=4))


@dataclass
class MetricSettings:
    omega: float = 100.0
    regularizer: float = 1e-6


@dataclass
class PipelineConfig:
    paths: Paths
    detector: DetectorParams = field(default_factory=DetectorParams)
    refiner: RefinerSettings = field(default_factory=RefinerSettings)
    privacy: PrivacySettings = field(default_factory=PrivacySettings)
    preprocess: PreprocessSettings = field(default_factory=PreprocessSettings)
    split: SplitSettings = field(default_factory=SplitSettings)
    tune: TuneSettings = field(default_factory=TuneSettings)
    metrics: MetricSettings = field(default_factory=MetricSettings)
    seed: int = 0
    workers: int = 1
    mock_services: bool = False

    @property
    def manifest_path(self) -> Path:
        return self.paths.output_dir / "manifest.jsonl"

    @property
    def subset_path(self) -> Path:
        return self.paths.output_dir / "privacy_subset.jsonl"


def _build(cls, data: dict[str, Any], where: str, base: Path):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        ftype = str(names[key].type)
        if "Path" in ftype:
            kwargs[key] = (base / value) if value else None
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def _stage(name: str, data: dict, num_workers: int, default: StageConfig) -> StageConfig:
    merged = {"learning_rate": default.learning_rate, "batch_size": default.batch_size,
              "iterations": default.iterations, "weight_decay": default.weight_decay, **data}
    unknown = set(merged) - {"learning_rate", "batch_size", "iterations", "weight_decay"}
    if unknown:
        raise ConfigError(f"[tune.{name}] unknown keys: {sorted(unknown)}")
    try:
        return StageConfig(name, num_workers=num_workers, **merged)
    except ValueError as exc:
        raise ConfigError(f"[tune.{name}] {exc}") from None


def config_from_dict(data: dict[str, Any], base: Path | str = ".") -> PipelineConfig:
    base = Path(base)
    data = dict(data)
    sections = {"paths", "detector", "refiner", "privacy", "preprocess", "split", "tune", "metrics"}
    top = {"seed", "workers", "mock_services"}
    unknown = set(data) - sections - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    paths_raw = data.get("paths", {})
    unknown = set(paths_raw) - {f.name for f in dataclasses.fields(Paths)}
    if unknown:
        raise ConfigError(f"[paths] unknown keys: {sorted(unknown)}")
    for key in ("input_manifest", "frame_store"):
        if key not in paths_raw:
            raise ConfigError(f"[paths] {key} is required")
    paths = Paths(
        input_manifest=base / paths_raw["input_manifest"],
        frame_store=base / paths_raw["frame_store"],
        cache_dir=base / paths_raw.get("cache_dir", "cache"),
        output_dir=base / paths_raw.get("output_dir", "run"),
    )

    tune_raw = dict(data.get("tune", {}))
    stage_raw = {n: tune_raw.pop(n, {}) for n in ("transfer_pretrain", "privacy_finetune")}
    tune = _build(TuneSettings, tune_raw, "tune", base)
    defaults = TuneSettings()
    tune.transfer_pretrain = _stage("transfer_pretrain", stage_raw["transfer_pretrain"], tune.num_workers,
                                    defaults.transfer_pretrain)
    tune.privacy_finetune = _stage("privacy_finetune", stage_raw["privacy_finetune"], tune.num_workers,
                                   defaults.privacy_finetune)
    if tune.privacy_finetune.learning_rate >= tune.transfer_pretrain.learning_rate:
        raise ConfigError("[tune] privacy_finetune.learning_rate must be below transfer_pretrain.learning_rate")

    cfg = PipelineConfig(
        paths=paths,
        detector=_build(DetectorParams, data.get("detector", {}), "detector", base),
        refiner=_build(RefinerSettings, data.get("refiner", {}), "refiner", base),
        privacy=_build(PrivacySettings, data.get("privacy", {}), "privacy", base),
        preprocess=_build(PreprocessSettings, data.get("preprocess", {}), "preprocess", base),
        split=_build(SplitSettings, data.get("split", {}), "split", base),
        tune=tune,
        metrics=_build(MetricSettings, data.get("metrics", {}), "metrics", base),
        seed=int(data.get("seed", 0)),
        workers=int(data.get("workers", 1)),
        mock_services=bool(data.get("mock_services", False)),
    )
    _check_files(cfg)
    return cfg


def _check_files(cfg: PipelineConfig) -> None:
    required = [("paths.input_manifest", cfg.paths.input_manifest), ("paths.frame_store", cfg.paths.frame_store)]
    for name in ("exemplars", "blocklist", "directive"):
        if getattr(cfg.refiner, name) is not None:
            required.append((f"refiner.{name}", getattr(cfg.refiner, name)))
    if cfg.privacy.prompt is not None:
        required.append(("privacy.prompt", cfg.privacy.prompt))
    for name, path in required:
        if not path.exists():
            raise ConfigError(f"{name}: {path} does not exist")


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    with path.open("rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, base=path.parent)
