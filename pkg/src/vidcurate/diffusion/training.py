"""Stage training loop, two-stage orchestration, and reverse sampling."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from ..atomic import atomic_write_bytes, atomic_write_text
from .denoiser import MLPDenoiser
from .schedule import NoiseSchedule, build_schedule, timestep_intervals
from .tokens import TokenSequence

log = logging.getLogger(__name__)

# Stage hyperparameters of the full-scale run; desk runs use StageConfig defaults.
REFERENCE_STAGES = {
    "transfer_pretrain": {"learning_rate": 1e-4, "batch_size": 128, "iterations": 65000},
    "privacy_finetune": {"learning_rate": 5e-5, "batch_size": 128, "iterations": 4500},
}
STAGE_NAMES = tuple(REFERENCE_STAGES)


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: str, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} in stage {stage!r} at iteration {iteration}")
        self.stage = stage
        self.iteration = iteration


@dataclass
class StageConfig:
    name: str
    learning_rate: float
    batch_size: int = 16
    iterations: int = 500
    num_workers: int = 4
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.name not in STAGE_NAMES:
            raise ValueError(f"stage name must be one of {STAGE_NAMES}, got {self.name!r}")
        if self.learning_rate < 0 or self.batch_size < 1 or self.iterations < 0 or self.num_workers < 1:
            raise ValueError(f"invalid hyperparameters for stage {self.name!r}")
        if self.batch_size < self.num_workers:
            raise ValueError("batch_size must be at least num_workers")

    @classmethod
    def reference(cls, name: str, num_workers: int = 8) -> "StageConfig":
        return cls(name=name, num_workers=num_workers, **REFERENCE_STAGES[name])


class PairSampler(Protocol):
    def sample(self, rng: np.random.Generator, batch: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (vision tokens (B, L, D), text tokens (B, Lt, D))."""


@dataclass
class ToyPairSampler:
    """Uniform sampling over a fixed list of (vision tokens, text tokens) pairs."""

    vision: list[np.ndarray]
    text: list[np.ndarray]

    def __post_init__(self):
        if not self.vision or len(self.vision) != len(self.text):
            raise ValueError("need equal, non-empty vision and text lists")

    def sample(self, rng, batch):
        idx = rng.integers(0, len(self.vision), size=batch)
        return (np.stack([self.vision[i] for i in idx]),
                np.stack([self.text[i] for i in idx]))

    def subset(self, indices) -> "ToyPairSampler":
        return ToyPairSampler([self.vision[i] for i in indices], [self.text[i] for i in indices])


class AdamW:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m = self.v = None
        self.step_count = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.step_count += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad ** 2
        m_hat = self.m / (1 - self.b1 ** self.step_count)
        v_hat = self.v / (1 - self.b2 ** self.step_count)
        return theta - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.wd * theta)


@dataclass
class StageResult:
    theta: np.ndarray
    losses: list[float] = field(default_factory=list)


def _streams(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    seeds = rng.integers(0, 2 ** 63 - 1, size=n)
    return [np.random.default_rng(int(s)) for s in seeds]


def _noised_batch(schedule, N, B, x0, noise_rng, timestep_rngs):
    """One t per simulated worker, shared by that worker's slice of the batch."""
    intervals = timestep_intervals(N, schedule.T)
    t = np.empty(B, dtype=np.int64)
    for i, rows in enumerate(np.array_split(np.arange(B), N)):
        lo, hi = intervals[i]
        t[rows] = timestep_rngs[i].integers(lo, hi + 1)
    eps = noise_rng.standard_normal(x0.shape)
    abar = schedule.alpha_bar[t - 1][:, None, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps, t, eps


def run_stage(cfg: StageConfig, denoiser: MLPDenoiser, data: PairSampler, rng: np.random.Generator,
              schedule: NoiseSchedule | None = None, theta: np.ndarray | None = None) -> StageResult:
    """Minimize the noise-prediction MSE over the denoiser parameters only."""
    schedule = schedule or build_schedule(1000)
    if cfg.num_workers > schedule.T:
        raise ValueError(f"num_workers {cfg.num_workers} exceeds T {schedule.T}")
    theta = (denoiser.theta if theta is None else theta).copy()
    opt = AdamW(cfg.learning_rate, weight_decay=cfg.weight_decay)
    data_rng, noise_rng, *t_rngs = _streams(rng, 2 + cfg.num_workers)
    losses = []
    for it in range(cfg.iterations):
        x0, text = data.sample(data_rng, cfg.batch_size)
        xt, t, eps = _noised_batch(schedule, cfg.num_workers, cfg.batch_size, x0, noise_rng, t_rngs)
        # frozen text provider: only its pooled embedding enters the denoiser
        loss, grad = denoiser.loss_and_grad(xt, t, text.mean(axis=1), eps, theta)
        if not np.isfinite(loss):
            raise TrainingDiverged(cfg.name, it, loss)
        losses.append(loss)
        theta = opt.step(theta, grad)
    return StageResult(theta, losses)


def evaluate_loss(denoiser: MLPDenoiser, theta: np.ndarray, data: PairSampler, schedule: NoiseSchedule,
                  batch: int = 512, seed: int = 0) -> float:
    """Loss on a fixed evaluation draw, so different θ can be compared fairly."""
    rng = np.random.default_rng(seed)
    x0, text = data.sample(rng, batch)
    t = rng.integers(1, schedule.T + 1, size=batch)
    eps = rng.standard_normal(x0.shape)
    abar = schedule.alpha_bar[t - 1][:, None, None]
    xt = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
    pred = denoiser.forward(xt, t, text.mean(axis=1), theta)
    return float(np.mean((pred - eps) ** 2))


@dataclass
class ProgressiveResult:
    theta: np.ndarray
    trace: list[tuple[str, int, float]]
    checkpoints: list[Path]


def run_progressive(stage1: StageConfig, stage2: StageConfig, denoiser: MLPDenoiser,
                    data1: PairSampler, data2: PairSampler, rng: np.random.Generator,
                    schedule: NoiseSchedule | None = None,
                    checkpoint_dir: str | Path | None = None) -> ProgressiveResult:
    """Transfer pre-training followed by lower-rate fine-tuning from its weights."""
    if stage2.learning_rate >= stage1.learning_rate:
        raise ValueError(f"fine-tune learning rate {stage2.learning_rate} must be below "
                         f"pre-train learning rate {stage1.learning_rate}")
    schedule = schedule or build_schedule(1000)
    rng1, rng2 = _streams(rng, 2)
    trace, ckpts = [], []
    theta = denoiser.theta
    for cfg, data, stage_rng in ((stage1, data1, rng1), (stage2, data2, rng2)):
        res = run_stage(cfg, denoiser, data, stage_rng, schedule, theta=theta)
        theta = res.theta
        trace.extend((cfg.name, i, loss) for i, loss in enumerate(res.losses))
        log.info("stage %s: %d iterations, final loss %s", cfg.name, cfg.iterations,
                 f"{res.losses[-1]:.5f}" if res.losses else "n/a")
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"{cfg.name}.ckpt"
            save_checkpoint(path, theta, stage=cfg.name, iteration=cfg.iterations, dim=denoiser.dim)
            ckpts.append(path)
    return ProgressiveResult(theta, trace, ckpts)


def reverse_step(z_t: np.ndarray, t: int, sched: NoiseSchedule, denoiser, context: TokenSequence,
                 rng: np.random.Generator, theta: np.ndarray | None = None) -> np.ndarray:
    """One ancestral DDPM step from z_t to z_{t-1}.

    ``denoiser`` is anything with ``evaluate(seq, t)``; ``context`` holds the
    text tokens that are prepended before evaluation.
    """
    from .tokens import concat_text

    alpha = sched.alpha_at(t)
    abar = sched.abar(t)
    seq = concat_text(TokenSequence(z_t, kind="vision"), context)
    eps_hat = denoiser.evaluate(seq, t) if theta is None else denoiser.evaluate(seq, t, theta)
    mean = (z_t - ((1.0 - alpha) / np.sqrt(1.0 - abar)) * eps_hat) / np.sqrt(alpha)
    sigma = sched.posterior_std(t)
    if sigma == 0.0:
        return mean
    return mean + sigma * rng.standard_normal(np.shape(z_t))


def sample_latents(shape: tuple[int, int], sched: NoiseSchedule, denoiser, context: TokenSequence,
                   rng: np.random.Generator, theta: np.ndarray | None = None) -> np.ndarray:
    """Run the full reverse chain from pure noise; returns a (length, D) block."""
    z = rng.standard_normal(shape)
    for t in range(sched.T, 0, -1):
        z = reverse_step(z, t, sched, denoiser, context, rng, theta)
    return z


def save_checkpoint(path: str | Path, theta: np.ndarray, *, stage: str, iteration: int, dim: int) -> None:
    """Header JSON line, then θ as little-endian float64."""
    header = json.dumps({"stage": stage, "iteration": iteration, "D": dim, "theta_length": int(theta.size)},
                        sort_keys=True).encode()
    payload = np.ascontiguousarray(theta, dtype="<f8").tobytes()
    atomic_write_bytes(path, header + b"\n" + payload)


def load_checkpoint(path: str | Path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(raw[:nl])
    payload = raw[nl + 1:]
    if len(payload) != 8 * header["theta_length"]:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, header promises "
                         f"{8 * header['theta_length']}")
    return header, np.frombuffer(payload, dtype="<f8").copy()


def write_loss_trace(path: str | Path, trace) -> None:
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "iteration", "loss"])
    for stage, it, loss in trace:
        w.writerow([stage, it, repr(float(loss))])
    atomic_write_text(path, buf.getvalue())
