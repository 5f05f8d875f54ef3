"""Fréchet distance between Gaussian feature fits, and clamped-cosine CLIPScore.

FID and FVD share the Fréchet computation; they differ only in which
external extractor produced the feature rows.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .atomic import atomic_write_bytes, atomic_write_text

FEATURE_MAGIC = b"OPHF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHII")

SINGULAR_EIG = 1e-10
REGULARIZER = 1e-6
RESIDUE_TOL = 1e-6


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    label: str = ""
    source: str = ""

    def __post_init__(self):
        self.rows = np.asarray(self.rows)
        if self.rows.ndim != 2:
            raise ValueError(f"feature rows must be 2-D, got shape {self.rows.shape}")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class FrechetResult:
    distance: float
    regularized: bool = False
    epsilon: float = 0.0
    meta: dict = field(default_factory=dict)

    def __float__(self):
        return self.distance


def fit_gaussian(f: FeatureMatrix | np.ndarray) -> GaussianStats:
    x = np.asarray(f.rows if isinstance(f, FeatureMatrix) else f, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need at least 2 feature rows, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature rows contain non-finite values")
    mu = x.mean(axis=0)
    centred = x - mu
    sigma = centred.T @ centred / (x.shape[0] - 1)
    return GaussianStats(mu, (sigma + sigma.T) / 2.0)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats, regularizer: float = REGULARIZER) -> FrechetResult:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of (S_a S_b)^(1/2) is taken from the eigenvalues of the
    symmetric matrix sqrt(S_a) S_b sqrt(S_a), which shares its spectrum.
    When either covariance is near-singular, ``regularizer`` * I is added
    to both and the result says so.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    sa, sb = a.sigma, b.sigma
    eps = 0.0
    try:
        min_eig = min(np.linalg.eigvalsh(sa)[0], np.linalg.eigvalsh(sb)[0])
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigendecomposition did not converge: {exc}") from exc
    cov_scale = max(1.0, float(np.abs(sa).max()), float(np.abs(sb).max()))
    if min_eig < -RESIDUE_TOL * cov_scale:
        raise ArithmeticError(f"covariance is not positive semi-definite (eigenvalue {min_eig:.3g})")
    if min_eig < SINGULAR_EIG:
        eps = regularizer
        eye = np.eye(sa.shape[0])
        sa, sb = sa + eps * eye, sb + eps * eye
    try:
        root_a = _psd_sqrt(sa)
        inner = root_a @ sb @ root_a
        lam = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigendecomposition did not converge: {exc}") from exc
    scale = max(1.0, float(np.abs(lam).max(initial=0.0)))
    if lam.min(initial=0.0) < -RESIDUE_TOL * scale:
        raise ArithmeticError(f"covariance product has negative eigenvalue {lam.min():.3g}")
    tr_sqrt = float(np.sqrt(np.clip(lam, 0.0, None)).sum())
    diff = a.mu - b.mu
    d2 = float(diff @ diff) + float(np.trace(sa)) + float(np.trace(sb)) - 2.0 * tr_sqrt
    if d2 < -RESIDUE_TOL * scale:
        raise ArithmeticError(f"Fréchet distance came out negative ({d2:.3g})")
    return FrechetResult(max(d2, 0.0), regularized=eps > 0, epsilon=eps,
                         meta={"dim": int(a.mu.size), "min_eigenvalue": float(min_eig)})


def clip_score(e_v: np.ndarray, e_t: np.ndarray, omega: float = 100.0) -> float:
    """omega * max(cos(e_v, e_t), 0)."""
    a = np.asarray(e_v, dtype=np.float64).ravel()
    b = np.asarray(e_t, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = float(a @ a), float(b @ b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("clip_score is undefined for a zero vector")
    # sqrt(na * nb) rather than |a||b| so identical inputs give exactly 1
    cos = float(a @ b) / np.sqrt(na * nb)
    return omega * max(min(cos, 1.0), 0.0)


def corpus_clip_score(videos: FeatureMatrix, texts: FeatureMatrix,
                      pairing: Sequence[tuple[int, int]] | None = None, omega: float = 100.0) -> float:
    """Mean per-pair score; default pairing is row i with row i."""
    if pairing is None:
        if videos.n != texts.n:
            raise ValueError(f"{videos.n} video rows vs {texts.n} text rows and no pairing given")
        pairing = [(i, i) for i in range(videos.n)]
    pairing = list(pairing)
    if not pairing:
        raise ValueError("empty pairing")
    used_v = {v for v, _ in pairing}
    used_t = {t for _, t in pairing}
    if used_v != set(range(videos.n)) or used_t != set(range(texts.n)):
        missing_v = sorted(set(range(videos.n)) - used_v)
        missing_t = sorted(set(range(texts.n)) - used_t)
        raise ValueError(f"unpaired rows: videos {missing_v[:5]}, texts {missing_t[:5]}")
    scores = [clip_score(videos.rows[v], texts.rows[t], omega) for v, t in pairing]
    return float(np.mean(scores))


def write_features(f: FeatureMatrix, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        rows = np.asarray(f.rows, dtype=np.float32)
        lines = [",".join(f"d{j}" for j in range(rows.shape[1]))]
        lines += [",".join(np.format_float_positional(x, unique=True, trim="-") for x in row)
                  for row in rows]
        atomic_write_text(path, "\n".join(lines) + "\n")
        return
    rows = np.ascontiguousarray(f.rows, dtype="<f4")
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows.shape[0], rows.shape[1])
    atomic_write_bytes(path, header + rows.tobytes())


def read_features(path: str | Path, label: str = "") -> FeatureMatrix:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _read_csv(path, label)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"{path}: file too short for a header")
    magic, version, n, d = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * n * d:
        raise FeatureFormatError(f"{path}: header says {n}x{d} floats ({4 * n * d} bytes), "
                                 f"payload has {len(payload)} bytes")
    rows = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    return FeatureMatrix(rows, label=label, source=path.name)


def _read_csv(path: Path, label: str) -> FeatureMatrix:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FeatureFormatError(f"{path}: empty CSV")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FeatureFormatError(f"{path}:{lineno}: expected {len(header)} values, got {len(row)}")
            try:
                rows.append([np.float32(x) for x in row])
            except ValueError:
                raise FeatureFormatError(f"{path}:{lineno}: non-numeric value") from None
    arr = np.array(rows, dtype=np.float32).reshape(len(rows), len(header))
    return FeatureMatrix(arr, label=label, source=path.name)
