"""Real-vs-generated classifiers for measuring distribution shift.

Two model families: a single dense layer on raw pixels (no non-linearity),
and a small 4-block convnet standing in for ResNet-18. Training is BCE with
Adam; accuracy is reported at the best validation epoch, with the final
epoch's accuracy kept alongside.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import ndtr

from . import nn_core
from .data_pipeline import resize
from .errors import ConfigError, DataError, ShapeError

REPORT_COLUMNS = ("classifier", "augment", "phase", "seed", "best_epoch", "val_accuracy")
CONVNET_NAME = "convnet4 (ResNet-18 stand-in)"


@dataclass(frozen=True)
class ShiftStudyConfig:
    classifier: str = "linear"
    augment: bool = False
    epochs: int = 50
    lr: float = 1e-4
    n_real: int = 10_000
    n_gen: int = 10_000
    split: float = 0.9
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.classifier not in ("linear", "convnet"):
            raise ConfigError(f"unknown classifier {self.classifier!r}")
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"split must lie in (0, 1), got {self.split}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentDraw:
    scale: float = 1.0
    offset: tuple = (0.0, 0.0)  # crop origin as a fraction of the free margin
    flip: bool = False
    angle: float = 0.0  # degrees


def draw_augment(rng: np.random.Generator) -> AugmentDraw:
    scale = rng.uniform(0.8, 1.0)
    offset = (rng.uniform(), rng.uniform())
    flip = bool(rng.uniform() < 0.5)
    angle = rng.uniform(-15.0, 15.0)
    return AugmentDraw(scale, offset, flip, angle)


def augment(image, rng: Optional[np.random.Generator] = None, draw: Optional[AugmentDraw] = None):
    """Random resize-crop, horizontal flip and rotation of a (c, h, w) image.

    Rotation fills uncovered pixels with the image minimum.
    """
    img = np.asarray(image, dtype=np.float64)
    if draw is None:
        draw = draw_augment(rng)
    c, h, w = img.shape
    ch, cw = max(1, int(round(draw.scale * h))), max(1, int(round(draw.scale * w)))
    y0 = int(round(draw.offset[0] * (h - ch)))
    x0 = int(round(draw.offset[1] * (w - cw)))
    out = img[:, y0 : y0 + ch, x0 : x0 + cw]
    if (ch, cw) != (h, w):
        out = resize(out, (h, w))
    if draw.flip:
        out = out[:, :, ::-1]
    if draw.angle != 0.0:
        out = rotate(out, draw.angle, fill=float(img.min()))
    return np.ascontiguousarray(out)


def rotate(img, degrees: float, fill: float):
    """Bilinear rotation about the image centre (inverse mapping)."""
    c, h, w = img.shape
    t = math.radians(degrees)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    sy = math.cos(t) * (yy - cy) - math.sin(t) * (xx - cx) + cy
    sx = math.sin(t) * (yy - cy) + math.cos(t) * (xx - cx) + cx
    inside = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
    sy, sx = np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    out = (
        img[:, y0, x0] * (1 - fy) * (1 - fx) + img[:, y0, x1] * (1 - fy) * fx
        + img[:, y1, x0] * fy * (1 - fx) + img[:, y1, x1] * fy * fx
    )
    return np.where(inside, out, fill)


def augment_batch(images, rng):
    return np.stack([augment(im, rng) for im in images])


# ---------------------------------------------------------------------------
# Classifiers
# ---------------------------------------------------------------------------


def build_classifier(kind: str, shape, seed: int) -> nn_core.Network:
    if kind == "linear":
        layers = [nn_core.Flatten(), nn_core.Dense(int(np.prod(shape)), 1)]
        return nn_core.Network.init(layers, seed, last_scale=0.01)
    if len(shape) != 3:
        raise ShapeError("the convnet classifier needs (c, h, w) images")
    widths, strides = (8, 16, 16, 32), (1, 2, 1, 2)
    layers, prev = [], shape[0]
    for wd, st in zip(widths, strides):
        layers += [nn_core.Conv(prev, wd, 3, st), nn_core.Norm(wd), nn_core.Activation("relu")]
        prev = wd
    layers += [nn_core.GlobalPool(), nn_core.Dense(prev, 1)]
    return nn_core.Network.init(layers, seed, last_scale=0.01)


def stratified_split(n_real: int, n_gen: int, split: float, seed: int):
    """Per-class split; returns (train indices, validation indices) into the
    concatenation [real, generated].

    Both classes share one permutation, so a generated sample that duplicates
    real sample i always lands on the same side of the split as i. Otherwise
    a memorised duplicate with the opposite label leaks into validation.
    """
    rng = np.random.default_rng([seed, 0x5B17])
    shared = rng.permutation(max(n_real, n_gen))
    train, val = [], []
    for offset, n in ((0, n_real), (n_real, n_gen)):
        perm = shared[shared < n] + offset
        k = int(round(split * n))
        train.append(perm[:k])
        val.append(perm[k:])
    return np.concatenate(train), np.concatenate(val)


@dataclass
class ShiftResult:
    network: nn_core.Network
    val_accuracy: float
    best_epoch: int
    final_accuracy: float
    log: list = field(default_factory=list)


def _accuracy(net, x, y, batch=2048):
    logits = np.concatenate([net(x[i : i + batch]).ravel() for i in range(0, len(x), batch)])
    return float(np.mean((logits > 0) == (y > 0.5)))


def train_shift_classifier(real, generated, cfg: ShiftStudyConfig) -> ShiftResult:
    real = np.asarray(real, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if len(real) == 0 or len(generated) == 0:
        raise DataError("both datasets must be non-empty")
    if real.shape[1:] != generated.shape[1:]:
        raise ShapeError(f"real {real.shape[1:]} and generated {generated.shape[1:]} shapes differ")
    if cfg.augment and real.ndim != 4:
        raise ShapeError("augmentation needs (n, c, h, w) images")
    tr, va = stratified_split(len(real), len(generated), cfg.split, cfg.seed)
    if len(va) == 0 or len(tr) == 0:
        raise DataError("degenerate split: empty train or validation set")
    x = np.concatenate([real, generated])
    y = np.concatenate([np.ones(len(real)), np.zeros(len(generated))])
    net = build_classifier(cfg.classifier, real.shape[1:], cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    state = nn_core.AdamState.fresh(net.params.size, cfg.lr)
    params = net.params
    best, best_epoch, best_params, log = -1.0, 0, params, []
    for epoch in range(cfg.epochs):
        losses = []
        for bi in nn_core.minibatches(len(tr), cfg.batch_size, rng):
            idx = tr[bi]
            xb = augment_batch(x[idx], rng) if cfg.augment else x[idx]
            cur = net.with_params(params)
            out, caches = nn_core.run_forward(cur, xb, train=True, rng=rng)
            loss, g = nn_core.bce_with_logits(out, y[idx])
            grad, _ = nn_core.run_backward(cur, caches, g.reshape(out.shape))
            params, state = nn_core.adam_step(params, grad, state)
            losses.append(loss)
        acc = _accuracy(net.with_params(params), x[va], y[va])
        log.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_accuracy": acc})
        if acc > best:
            best, best_epoch, best_params = acc, epoch, params
    return ShiftResult(net.with_params(best_params), best, best_epoch, log[-1]["val_accuracy"], log)


def classifier_label(cfg: ShiftStudyConfig) -> str:
    return "linear" if cfg.classifier == "linear" else CONVNET_NAME


def shift_report(real, gen_pre_dg, gen_post_dg, cfgs) -> list[dict]:
    """One row per (config, phase), long form."""
    rows = []
    for cfg in cfgs:
        for phase, gen in (("pre", gen_pre_dg), ("post", gen_post_dg)):
            res = train_shift_classifier(real, gen, cfg)
            rows.append({
                "classifier": classifier_label(cfg),
                "augment": cfg.augment,
                "phase": phase,
                "seed": cfg.seed,
                "best_epoch": res.best_epoch,
                "val_accuracy": res.val_accuracy,
                "final_accuracy": res.final_accuracy,
            })
    return rows


def report_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "val_accuracy": repr(float(row["val_accuracy"]))})
    return buf.getvalue()


def bayes_accuracy_equal_cov(delta_norm: float, sigma: float) -> float:
    """Bayes accuracy for two equal-weight Gaussians with shared isotropic
    covariance sigma^2 I and mean distance ``delta_norm``."""
    return float(ndtr(delta_norm / (2.0 * sigma)))


def with_seed(cfg: ShiftStudyConfig, seed: int) -> ShiftStudyConfig:
    return replace(cfg, seed=seed)
