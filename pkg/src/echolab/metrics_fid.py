"""Frechet distance between Gaussian fits of feature clouds.

Inception features are replaced by deterministic extractors: raw pixels
(optionally average-pooled), a fixed random projection, or a fixed-seed
random conv net.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import nn_core
from .errors import ConfigError, DataError, NumericError, ShapeError

EIG_CLAMP = 1e-10
PSD_TOL = 1e-8
STATS_CHUNK = 4096


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int
    extractor: Optional[str] = None

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("FeatureStats needs count >= 2")
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise ShapeError(f"covariance {self.covariance.shape} does not match mean ({d},)")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<Q", self.count))
        h.update(self.mean.astype("<f8").tobytes())
        h.update(self.covariance.astype("<f8").tobytes())
        return h.hexdigest()


def compute_stats(features, extractor: Optional[str] = None) -> FeatureStats:
    """Column mean and unbiased covariance.

    Rows are reduced in fixed-size chunks combined in a fixed order, so the
    result does not depend on how many threads BLAS uses.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        f = f.reshape(f.shape[0], -1)
    n = f.shape[0]
    if n < 2:
        raise ValueError(f"compute_stats needs at least 2 rows, got {n}")
    mean = _tree_sum([c.sum(axis=0) for c in _chunks(f)]) / n
    parts = []
    for c in _chunks(f):
        dc = c - mean
        parts.append(dc.T @ dc)
    cov = _tree_sum(parts) / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return FeatureStats(mean, cov, n, extractor)


def _chunks(f):
    for start in range(0, f.shape[0], STATS_CHUNK):
        yield f[start : start + STATS_CHUNK]


def _tree_sum(parts):
    parts = list(parts)
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _sym_eig(m, tol=PSD_TOL):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got {m.shape}")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > tol * scale:
        raise NumericError("matrix is not symmetric within tolerance")
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.size and w.min() < -tol * scale:
        raise NumericError(f"matrix is not PSD (smallest eigenvalue {w.min():.3g})")
    return w, v


def matrix_sqrt_psd(m) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition."""
    w, v = _sym_eig(m)
    w = np.where(w < EIG_CLAMP, 0.0, w)
    s = (v * np.sqrt(w)) @ v.T
    return 0.5 * (s + s.T)


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.dim != b.dim:
        raise ShapeError(f"feature dims differ: {a.dim} vs {b.dim}")
    root_a = matrix_sqrt_psd(a.covariance)
    inner = root_a @ b.covariance @ root_a
    w, _ = _sym_eig(0.5 * (inner + inner.T), tol=1e-6)
    cross = np.sqrt(np.where(w < EIG_CLAMP, 0.0, w)).sum()
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * cross
    return float(max(value, 0.0))


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureExtractor:
    kind: str = "raw_pixels"
    downsample: int = 1
    dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("raw_pixels", "random_projection", "random_conv"):
            raise ConfigError(f"unknown extractor kind {self.kind!r}")
        if self.downsample < 1 or self.dim < 1:
            raise ConfigError("extractor downsample and dim must be >= 1")

    @property
    def identity(self) -> str:
        if self.kind == "raw_pixels":
            return f"raw_pixels(downsample={self.downsample})"
        return f"{self.kind}(dim={self.dim},seed={self.seed})"

    def __call__(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if self.kind == "raw_pixels":
            if x.ndim == 4 and self.downsample > 1:
                x = _avg_pool(x, self.downsample)
            return x.reshape(x.shape[0], -1)
        if self.kind == "random_projection":
            flat = x.reshape(x.shape[0], -1)
            return flat @ _projection(flat.shape[1], self.dim, self.seed)
        if x.ndim == 2:
            x = x[:, None, :, None]
        net = _random_conv(x.shape[1], self.dim, self.seed)
        return np.concatenate([net(x[i : i + 512]) for i in range(0, len(x), 512)])


def _avg_pool(x, k):
    n, c, h, w = x.shape
    h2, w2 = h // k, w // k
    return x[:, :, : h2 * k, : w2 * k].reshape(n, c, h2, k, w2, k).mean(axis=(3, 5))


_projection_cache: dict = {}
_conv_cache: dict = {}


def _projection(d_in, d_out, seed):
    key = (d_in, d_out, seed)
    if key not in _projection_cache:
        rng = np.random.default_rng([seed, d_in, d_out])
        _projection_cache[key] = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)
    return _projection_cache[key]


def _random_conv(channels, dim, seed):
    key = (channels, dim, seed)
    if key not in _conv_cache:
        layers = [
            nn_core.Conv(channels, 8, 3), nn_core.Activation("relu"),
            nn_core.Conv(8, 16, 3, stride=2), nn_core.Activation("relu"),
            nn_core.Conv(16, 32, 3, stride=2), nn_core.Activation("relu"),
            nn_core.GlobalPool(), nn_core.Dense(32, dim),
        ]
        _conv_cache[key] = nn_core.Network.init(layers, seed)
    return _conv_cache[key]


# ---------------------------------------------------------------------------
# FID
# ---------------------------------------------------------------------------


def _resolve(side, extractor: FeatureExtractor) -> FeatureStats:
    if isinstance(side, FeatureStats):
        if side.extractor is not None and side.extractor != extractor.identity:
            raise ConfigError(
                f"cached stats were computed with {side.extractor}, request uses {extractor.identity}"
            )
        return side
    return compute_stats(extractor(side), extractor.identity)


def fid(real, generated, extractor: FeatureExtractor = FeatureExtractor()) -> float:
    return frechet_distance(_resolve(real, extractor), _resolve(generated, extractor))


@dataclass
class FIDRecord:
    extractor: str
    n_real: int
    n_gen: int
    seed: int
    value: float
    real_stats_digest: str
    gen_stats_digest: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FIDContext:
    """Pinned real-side statistics reused across many FID evaluations."""

    extractor: FeatureExtractor
    real_stats: FeatureStats

    @classmethod
    def from_images(cls, real, extractor: FeatureExtractor) -> "FIDContext":
        return cls(extractor, compute_stats(extractor(real), extractor.identity))

    def fid(self, generated) -> float:
        return fid(self.real_stats, generated, self.extractor)

    def record(self, generated, seed: int) -> FIDRecord:
        gen = _resolve(generated, self.extractor)
        return FIDRecord(
            self.extractor.identity, self.real_stats.count, gen.count, seed,
            frechet_distance(self.real_stats, gen), self.real_stats.digest(), gen.digest(),
        )


def split_halves(n: int, split_seed: int):
    perm = np.random.default_rng(split_seed).permutation(n)
    return np.sort(perm[: n // 2]), np.sort(perm[n // 2 :])


def optimal_fid(dataset, extractor: FeatureExtractor, split_seed: int) -> float:
    """FID between two random disjoint halves of one dataset."""
    x = np.asarray(dataset)
    if len(x) < 4:
        raise DataError(f"optimal_fid needs at least 4 samples, got {len(x)}")
    a, b = split_halves(len(x), split_seed)
    return fid(x[a], x[b], extractor)


@dataclass
class VarianceResult:
    mode: str
    mean: float
    std: float
    rows: list = field(default_factory=list)


def subsample_indices(pool_size: int, n: int, seed: int) -> np.ndarray:
    if n > pool_size:
        raise DataError(f"cannot draw {n} samples without replacement from {pool_size}")
    return np.sort(np.random.default_rng(seed).choice(pool_size, size=n, replace=False))


def fid_variance_protocol(mode: str, repeats: int, n: int, real_pool, generate: Callable[[int], np.ndarray],
                          extractor: FeatureExtractor, seed: int, sub_seeds=None) -> VarianceResult:
    """Repeat FID while varying one side only.

    ``vary_real``: one generated set (from ``generate(seed)``), fresh real
    subsample of size n per repeat. ``vary_generated``: one pinned real
    subsample, ``generate(sub_seed)`` per repeat. Sub-seeds default to
    ``seed + 1 + i``; passing equal sub-seeds removes all variation.
    """
    if mode not in ("vary_real", "vary_generated"):
        raise ConfigError(f"unknown variance mode {mode!r}")
    if repeats < 2:
        raise ConfigError("repeats must be >= 2")
    pool = np.asarray(real_pool)
    if sub_seeds is None:
        sub_seeds = [seed + 1 + i for i in range(repeats)]
    sub_seeds = list(sub_seeds)
    if len(sub_seeds) != repeats:
        raise ConfigError("need one sub-seed per repeat")
    overlap = n / len(pool)  # expected shared fraction of two subsamples
    rows = []
    if mode == "vary_real":
        gen_stats = compute_stats(extractor(generate(seed)), extractor.identity)
        for i, s in enumerate(sub_seeds):
            real = pool[subsample_indices(len(pool), n, s)]
            rows.append({"repeat": i, "sub_seed": s, "fid": fid(real, gen_stats, extractor),
                         "expected_overlap": overlap})
    else:
        real_stats = compute_stats(extractor(pool[subsample_indices(len(pool), n, seed)]), extractor.identity)
        for i, s in enumerate(sub_seeds):
            rows.append({"repeat": i, "sub_seed": s, "fid": fid(real_stats, generate(s), extractor),
                         "expected_overlap": 0.0})
    values = np.array([r["fid"] for r in rows])
    return VarianceResult(mode, float(values.mean()), float(values.std(ddof=1)), rows)


# ---------------------------------------------------------------------------
# Stats cache files
# ---------------------------------------------------------------------------

STATS_MAGIC = b"DBFS"
STATS_VERSION = 1


def save_stats(path, stats: FeatureStats) -> None:
    ident = (stats.extractor or "").encode()
    out = STATS_MAGIC + struct.pack("<IIQI", STATS_VERSION, stats.dim, stats.count, len(ident)) + ident
    out += stats.mean.astype("<f8").tobytes() + stats.covariance.astype("<f8").tobytes()
    Path(path).write_bytes(out)


def load_stats(path) -> FeatureStats:
    buf = Path(path).read_bytes()
    if buf[:4] != STATS_MAGIC:
        raise DataError(f"{path}: not a stats file")
    try:
        version, d, count, ilen = struct.unpack_from("<IIQI", buf, 4)
    except struct.error as exc:
        raise DataError(f"{path}: truncated stats header") from exc
    if version != STATS_VERSION:
        raise DataError(f"{path}: unsupported stats version {version}")
    pos = 24 + ilen
    if len(buf) != pos + 8 * (d + d * d):
        raise DataError(f"{path}: stats payload has wrong size")
    ident = buf[24:pos].decode() or None
    mean = np.frombuffer(buf, "<f8", d, pos).astype(np.float64)
    cov = np.frombuffer(buf, "<f8", d * d, pos + 8 * d).astype(np.float64).reshape(d, d)
    return FeatureStats(mean, cov, count, ident)
