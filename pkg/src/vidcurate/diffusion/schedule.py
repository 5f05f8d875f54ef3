"""Noise schedules and the closed-form forward process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("linear-beta",)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step signal retention tables for t = 1..T.

    Arrays are stored zero-based: ``alpha[t - 1]`` is the value at step t.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, t: int) -> float:
        self._check(t)
        return float(self.alpha_bar[t - 1])

    def abar_prev(self, t: int) -> float:
        """ᾱ at t-1, with ᾱ_0 = 1."""
        self._check(t)
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def alpha_at(self, t: int) -> float:
        self._check(t)
        return float(self.alpha[t - 1])

    def beta_at(self, t: int) -> float:
        self._check(t)
        return float(self.beta[t - 1])

    def posterior_std(self, t: int) -> float:
        """σ_t with σ_t² = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t); zero at t = 1."""
        if t == 1:
            self._check(t)
            return 0.0
        var = self.beta_at(t) * (1.0 - self.abar_prev(t)) / (1.0 - self.abar(t))
        return float(np.sqrt(var))

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def build_schedule(T: int, kind: str = "linear-beta",
                   beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def add_noise(z: np.ndarray, eps: np.ndarray, abar_t: float) -> np.ndarray:
    """Sample z_t = sqrt(ᾱ_t) z + sqrt(1 - ᾱ_t) ε."""
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ValueError(f"shape mismatch: z {z.shape} vs eps {eps.shape}")
    if not 0.0 < abar_t <= 1.0:
        raise ValueError(f"abar_t must lie in (0, 1], got {abar_t}")
    return np.sqrt(abar_t) * z + np.sqrt(1.0 - abar_t) * eps


def diffusion_loss(pred: np.ndarray, eps: np.ndarray) -> float:
    """Mean squared error between predicted and true noise."""
    pred = np.asarray(pred, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if pred.shape != eps.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs eps {eps.shape}")
    return float(np.mean((pred - eps) ** 2))


def timestep_intervals(N: int, T: int) -> list[tuple[int, int]]:
    """Split [1, T] into N contiguous inclusive intervals.

    The first ``T mod N`` intervals get one extra step.
    """
    if N < 1 or N > T:
        raise ValueError(f"need 1 <= N <= T, got N={N}, T={T}")
    base, extra = divmod(T, N)
    out = []
    lo = 1
    for j in range(N):
        length = base + (1 if j < extra else 0)
        out.append((lo, lo + length - 1))
        lo += length
    return out


def sample_timestep(worker_index: int, N: int, T: int, rng: np.random.Generator,
                    size: int | None = None) -> int | np.ndarray:
    """Draw t uniformly from the sub-interval owned by ``worker_index``.

    With ``size`` set, returns that many independent draws as an int64 array.
    """
    intervals = timestep_intervals(N, T)
    if not 0 <= worker_index < N:
        raise ValueError(f"worker_index {worker_index} outside [0, {N})")
    lo, hi = intervals[worker_index]
    if size is not None:
        return rng.integers(lo, hi + 1, size=size)
    return int(rng.integers(lo, hi + 1))
