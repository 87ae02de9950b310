"""Dataset construction and the on-disk dataset format.

Real echocardiogram videos are out of reach here, so the pipeline runs on
frames-on-disk (PGM or .npy) and on two synthetic generators: sector-masked
speckle phantoms and Gaussian-mixture vector data.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.ndimage import gaussian_filter
from scipy.special import ndtr, ndtri

from .errors import ConfigError, DataError

# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------


@dataclass
class FrameDataset:
    """Images of shape (n, channels, h, w) with per-image provenance.

    ``normalization`` is the native intensity interval mapped onto [-1, 1].
    """

    images: np.ndarray
    manifest: list = field(default_factory=list)
    normalization: tuple = (0.0, 1.0)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 4:
            raise DataError(f"images must be (n, c, h, w), got {self.images.shape}")
        if not self.manifest:
            self.manifest = [("", i) for i in range(len(self.images))]
        if len(self.manifest) != len(self.images):
            raise DataError("manifest length differs from image count")
        self.manifest = [(str(s), int(i)) for s, i in self.manifest]
        self.normalization = tuple(float(v) for v in self.normalization)

    def __len__(self):
        return len(self.images)

    @property
    def resolution(self):
        return self.images.shape[2:]

    def to_unit(self, clip: bool = False) -> np.ndarray:
        return to_unit(self.images, self.normalization, clip)

    def __eq__(self, other):
        return (
            isinstance(other, FrameDataset)
            and self.images.dtype == other.images.dtype
            and np.array_equal(self.images, other.images)
            and self.manifest == other.manifest
            and self.normalization == other.normalization
        )


def to_unit(x, normalization=(0.0, 1.0), clip: bool = False):
    lo, hi = normalization
    out = 2.0 * (np.asarray(x, dtype=np.float64) - lo) / (hi - lo) - 1.0
    return np.clip(out, -1.0, 1.0) if clip else out


def from_unit(x, normalization=(0.0, 1.0)):
    lo, hi = normalization
    return (np.asarray(x, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo


def subsample_frames(video, stride: int) -> list:
    """Keep frames 0, stride, 2*stride, ..."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if len(video) == 0:
        raise DataError("cannot subsample an empty video")
    return list(video[::stride])


def resize(image, target) -> np.ndarray:
    """Bilinear resize of the last two axes, half-pixel centres
    (align_corners=False), edge-clamped so no value leaves the input range."""
    img = np.asarray(image, dtype=np.float64)
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ConfigError(f"target size must be positive, got {target}")
    h, w = img.shape[-2:]
    if h == 0 or w == 0:
        raise DataError("cannot resize an empty image")
    if (h, w) == (th, tw):
        return img.copy()
    y0, y1, fy = _axis_weights(h, th)
    x0, x1, fx = _axis_weights(w, tw)
    rows = img[..., y0, :] * (1 - fy)[:, None] + img[..., y1, :] * fy[:, None]
    return rows[..., x0] * (1 - fx) + rows[..., x1] * fx


def _axis_weights(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


# ---------------------------------------------------------------------------
# Speckle phantoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomParams:
    """Sector geometry, speckle strength and the in-sector intensity mixture.

    ``apex`` is (x, y) in normalised image coordinates; the cone opens
    downwards. ``grain`` is the speckle strength (0 gives a noiseless image).
    """

    size: int = 32
    sector_angle: float = 75.0
    apex: tuple = (0.5, 0.02)
    grain: float = 0.6
    smoothness: float = 3.0
    intensity_weights: tuple = (0.35, 0.4, 0.25)
    intensity_means: tuple = (0.2, 0.5, 0.8)
    intensity_variances: tuple = (0.004, 0.006, 0.003)
    structure_seed: int = 0
    background: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.sector_angle < 180.0:
            raise ConfigError(f"sector angle must lie in (0, 180) degrees, got {self.sector_angle}")
        w = np.asarray(self.intensity_weights, dtype=float)
        if (
            len(w) != len(self.intensity_means) or len(w) != len(self.intensity_variances)
            or np.any(w < 0) or abs(w.sum() - 1) > 1e-9 or min(self.intensity_variances) <= 0
        ):
            raise ConfigError("invalid intensity mixture")
        if self.grain < 0:
            raise ConfigError("grain must be non-negative")


def sector_mask(params: PhantomParams) -> np.ndarray:
    s = params.size
    yy, xx = np.mgrid[0:s, 0:s]
    px = (xx + 0.5) / s - params.apex[0]
    py = (yy + 0.5) / s - params.apex[1]
    angle = np.degrees(np.arctan2(np.abs(px), py))
    radius = np.hypot(px, py)
    return (py > 0) & (angle <= params.sector_angle / 2) & (radius <= 1.0 - params.apex[1])


def mixture_cdf(x, weights, means, variances):
    x = np.asarray(x, dtype=np.float64)[..., None]
    return np.sum(np.asarray(weights) * ndtr((x - np.asarray(means)) / np.sqrt(variances)), axis=-1)


def mixture_quantile(u, weights, means, variances, iters: int = 80):
    """Inverse mixture CDF by vectorised bisection."""
    sd = np.sqrt(variances)
    lo = np.full(np.shape(u), float(np.min(np.asarray(means) - 12 * sd)))
    hi = np.full(np.shape(u), float(np.max(np.asarray(means) + 12 * sd)))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = mixture_cdf(mid, weights, means, variances) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def _anatomy(params: PhantomParams, mask):
    """Smooth structure field, rank-Gaussianised over the sector so its
    empirical distribution is exactly normal there."""
    rng = np.random.default_rng([params.structure_seed, 0x5EC7])
    field_ = gaussian_filter(rng.standard_normal((params.size, params.size)), params.smoothness)
    vals = field_[mask]
    ranks = np.empty(vals.size)
    ranks[np.argsort(vals, kind="stable")] = np.arange(vals.size)
    out = np.zeros_like(field_)
    out[mask] = ndtri((ranks + 0.5) / vals.size)
    return out


def generate_phantoms(params: PhantomParams, n: int, seed: int) -> FrameDataset:
    """Sector-masked speckle images over a fixed anatomy.

    Per pixel, a latent Gaussian mixes the smooth anatomy with iid speckle
    (weight ``grain``); the latent is mapped through the intensity mixture's
    quantile function, so in-sector pixels are distributed as that mixture.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    mask = sector_mask(params)
    anatomy = _anatomy(params, mask)[mask]
    g = params.grain
    mix = (params.intensity_weights, params.intensity_means, params.intensity_variances)
    images = np.full((n, 1, params.size, params.size), params.background, dtype=np.float64)
    for i in range(n):
        rng = np.random.default_rng([seed % 2**63, i])
        latent = (anatomy + g * rng.standard_normal(anatomy.size)) / math.sqrt(1.0 + g * g)
        images[i, 0][mask] = mixture_quantile(ndtr(latent), *mix)
    manifest = [(f"phantom-{params.structure_seed}", i) for i in range(n)]
    return FrameDataset(images, manifest, (0.0, 1.0))


# ---------------------------------------------------------------------------
# Gaussian-mixture vector data
# ---------------------------------------------------------------------------


def generate_gmm_dataset(weights, means, covs, n: int, seed: int):
    """n iid draws from a Gaussian mixture; returns (samples, component labels).

    Zero weights are allowed (that component is never drawn).
    """
    w = np.asarray(weights, dtype=np.float64)
    mu = np.atleast_2d(np.asarray(means, dtype=np.float64))
    k, d = mu.shape
    cv = np.asarray(covs, dtype=np.float64)
    if cv.ndim == 2 and cv.shape == (k, d):
        cv = np.stack([np.diag(c) for c in cv])
    if w.shape != (k,) or cv.shape != (k, d, d):
        raise ConfigError("mixture weights/means/covariances disagree in size")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError("mixture weights must be non-negative and sum to 1")
    try:
        chol = np.linalg.cholesky(cv)
    except np.linalg.LinAlgError as exc:
        raise ConfigError("mixture covariances must be positive definite") from exc
    rng = np.random.default_rng(seed)
    labels = rng.choice(k, size=n, p=w)
    z = rng.standard_normal((n, d))
    return mu[labels] + np.einsum("nij,nj->ni", chol[labels], z), labels


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

MAGIC = b"DBDS"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
DTYPE_CODES = {v.str: k for k, v in DTYPES.items()}
HEADER = struct.Struct("<4sIQIIIIdd")


class DatasetFormatError(DataError):
    pass


class CorruptHeaderError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class DigestMismatchError(DatasetFormatError):
    pass


def fnv1a64(data: bytes) -> int:
    """Reference 64-bit FNV-1a."""
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@njit(cache=True)
def _fnv1a64_kernel(arr):
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for b in arr:
        h = (h ^ np.uint64(b)) * prime
    return h


def digest(data: bytes) -> int:
    return int(_fnv1a64_kernel(np.frombuffer(data, dtype=np.uint8)))


def encode_dataset(ds: FrameDataset) -> bytes:
    dt = ds.images.dtype.newbyteorder("<") if ds.images.dtype.byteorder not in "<|=" else ds.images.dtype
    dt = np.dtype(dt.str.replace("=", "<"))
    if dt.str not in DTYPE_CODES:
        raise DataError(f"unsupported image dtype {ds.images.dtype}")
    n, c, h, w = ds.images.shape
    lo, hi = ds.normalization
    body = bytearray(HEADER.pack(MAGIC, VERSION, n, h, w, c, DTYPE_CODES[dt.str], lo, hi))
    for source, idx in ds.manifest:
        sb = source.encode()
        body += struct.pack("<I", len(sb)) + sb + struct.pack("<Q", idx)
    body += np.ascontiguousarray(ds.images, dtype=dt).tobytes()
    return bytes(body) + struct.pack("<Q", digest(bytes(body)))


def decode_dataset(buf: bytes) -> FrameDataset:
    if len(buf) < HEADER.size or buf[:4] != MAGIC:
        raise CorruptHeaderError("not a dataset file (bad magic or short header)")
    magic, version, n, h, w, c, code, lo, hi = HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"dataset version {version}, expected {VERSION}")
    if code not in DTYPES or min(h, w, c) < 1:
        raise CorruptHeaderError(f"invalid header fields (dtype code {code}, shape {c}x{h}x{w})")
    pos, manifest = HEADER.size, []
    try:
        for _ in range(n):
            (slen,) = struct.unpack_from("<I", buf, pos)
            source = buf[pos + 4 : pos + 4 + slen]
            if len(source) != slen:
                raise struct.error
            (idx,) = struct.unpack_from("<Q", buf, pos + 4 + slen)
            manifest.append((source.decode(), idx))
            pos += 12 + slen
    except struct.error as exc:
        raise TruncatedPayloadError("file ends inside the manifest block") from exc
    dt = DTYPES[code]
    size = n * c * h * w * dt.itemsize
    if len(buf) < pos + size + 8:
        raise TruncatedPayloadError(f"payload truncated: need {pos + size + 8} bytes, file has {len(buf)}")
    if len(buf) > pos + size + 8:
        raise CorruptHeaderError("trailing bytes after footer")
    (stored,) = struct.unpack_from("<Q", buf, pos + size)
    if stored != digest(buf[: pos + size]):
        raise DigestMismatchError("content digest does not match footer")
    images = np.frombuffer(buf, dtype=dt, count=n * c * h * w, offset=pos).reshape(n, c, h, w).copy()
    return FrameDataset(images, manifest, (lo, hi))


def save_dataset(path, ds: FrameDataset) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path) -> FrameDataset:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {path}") from exc
    return decode_dataset(buf)


def vectors_to_dataset(x, source: str = "vectors") -> FrameDataset:
    """Store (n, d) vectors as (n, 1, 1, d) images."""
    x = np.asarray(x)
    return FrameDataset(x.reshape(len(x), 1, 1, -1), [(source, i) for i in range(len(x))], (-1.0, 1.0))


# ---------------------------------------------------------------------------
# Frame-directory ingestion
# ---------------------------------------------------------------------------


def read_pgm(path) -> np.ndarray:
    """Binary (P5) 8/16-bit PGM to a float array in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise DataError(f"{path}: only binary P5 PGM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dt = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(buf, dtype=dt, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, image) -> None:
    img = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def ingest_frame_dir(directory, stride: int = 5, target=(64, 64)) -> FrameDataset:
    """Build a dataset from a directory of frame files plus a sidecar
    ``manifest.txt`` ("source_id frame_index filename" per line).

    Frames of each source are ordered by frame index, subsampled 1-in-stride
    and resized to ``target``.
    """
    directory = Path(directory)
    sidecar = directory / "manifest.txt"
    if not sidecar.exists():
        raise DataError(f"{directory}: missing manifest.txt")
    videos: dict[str, list] = {}
    for lineno, line in enumerate(sidecar.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"manifest.txt:{lineno}: expected 'source_id frame_index filename'")
        videos.setdefault(parts[0], []).append((int(parts[1]), parts[2]))
    images, manifest = [], []
    for source in sorted(videos):
        frames = sorted(videos[source])
        for idx, name in subsample_frames(frames, stride):
            path = directory / name
            img = np.load(path) if path.suffix == ".npy" else read_pgm(path)
            images.append(resize(img, target)[None])
            manifest.append((source, idx))
    if not images:
        raise DataError(f"{directory}: no frames listed")
    return FrameDataset(np.stack(images), manifest, (0.0, 1.0))
