"""Discriminator guidance.

A real-vs-generated discriminator d(x, sigma) gives the log density ratio
log(d / (1 - d)); its input gradient is added to the sampling score. The
analytic discriminator built from two known densities recovers the real
score exactly when all weights are 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core
from .diffusion_core import (
    FIRST_ORDER,
    Denoiser,
    NoiseSchedule,
    _per_row,
    append_noise_embedding,
    c_noise,
    strip_noise_embedding,
)
from .errors import ConfigError, DataError, NumericError, ShapeError

MAX_LOGIT = 30.0


@dataclass(frozen=True)
class GuidanceConfig:
    """Predictor and corrector weights plus a global multiplier on the
    density-ratio gradient. The predictor's composite factor is
    ``weight_first_order * dg_scale`` (10 at the defaults)."""

    weight_first_order: float = 5.0
    weight_correction: float = 0.0
    dg_scale: float = 2.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"guidance.{name} must be finite and non-negative, got {v}")

    def multiplier(self, stage: str) -> float:
        w = self.weight_first_order if stage == FIRST_ORDER else self.weight_correction
        return w * self.dg_scale


class Discriminator:
    def logit(self, x, sigma) -> np.ndarray:
        raise NotImplementedError

    def prob(self, x, sigma) -> np.ndarray:
        return nn_core.sigmoid(self.logit(x, sigma))

    def log_ratio_grad(self, x, sigma) -> np.ndarray:
        raise NotImplementedError


@dataclass(eq=False)
class AnalyticDiscriminator(Discriminator):
    """Bayes-optimal discriminator between two analytic noisy marginals."""

    real: Denoiser
    model: Denoiser

    def logit(self, x, sigma):
        return self.real.log_density(x, sigma) - self.model.log_density(x, sigma)

    def log_ratio_grad(self, x, sigma):
        return self.real.score(x, sigma) - self.model.score(x, sigma)


@dataclass(eq=False)
class NeuralDiscriminator(Discriminator):
    """Network taking (image, noise embedding) and returning one logit."""

    net: nn_core.Network
    max_logit: float = MAX_LOGIT

    def _input(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        return append_noise_embedding(x, c_noise(np.asarray(sigma, dtype=np.float64)))

    def logit(self, x, sigma):
        out, _ = nn_core.run_forward(self.net, self._input(x, sigma))
        return out.reshape(len(out))

    def log_ratio_grad(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        out, caches = nn_core.run_forward(self.net, self._input(x, sigma))
        if np.any(np.abs(out) > self.max_logit):
            raise NumericError(
                f"discriminator saturated (|logit| up to {np.abs(out).max():.1f} > {self.max_logit})"
            )
        _, gx = nn_core.run_backward(self.net, caches, np.ones_like(out))
        return strip_noise_embedding(gx).reshape(x.shape)


def density_ratio_grad(disc: Discriminator, x, sigma) -> np.ndarray:
    """Gradient of log(d / (1 - d)) with respect to x."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("density_ratio_grad needs sigma > 0")
    return disc.log_ratio_grad(x, sigma)


@dataclass(eq=False)
class GuidedDenoiser(Denoiser):
    inner: Denoiser
    disc: Discriminator
    config: GuidanceConfig

    @property
    def shape(self):
        return self.inner.shape

    def __call__(self, x, sigma, stage: str = FIRST_ORDER):
        out = self.inner(x, sigma, stage=stage)
        w = self.config.multiplier(stage)
        if w == 0.0 or np.all(np.asarray(sigma) == 0):
            return out
        x = np.asarray(x, dtype=np.float64)
        return out + _per_row(sigma, x) ** 2 * w * density_ratio_grad(self.disc, x, sigma)

    def score(self, x, sigma, stage: str = FIRST_ORDER):
        base = self.inner.score(x, sigma)
        w = self.config.multiplier(stage)
        if w == 0.0:
            return base
        return base + w * density_ratio_grad(self.disc, x, sigma)


def guided_denoiser(d: Denoiser, disc: Discriminator, cfg: GuidanceConfig) -> GuidedDenoiser:
    return GuidedDenoiser(d, disc, cfg)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def default_discriminator_net(shape, hidden: int = 64, seed: int = 0) -> nn_core.Network:
    """MLP for vectors, small conv encoder for images; final layer starts
    near zero so the untrained output is ~0.5."""
    if len(shape) == 1:
        layers = nn_core.mlp([shape[0] + 1, hidden, hidden, 1], "silu")
    else:
        c, h, w = shape
        h2, w2 = -(-h // 2), -(-w // 2)
        layers = [
            nn_core.Conv(c + 1, 8, 3), nn_core.Activation("silu"),
            nn_core.Conv(8, 16, 3, stride=2), nn_core.Activation("silu"),
            nn_core.Flatten(), nn_core.Dense(16 * h2 * w2, hidden), nn_core.Activation("silu"),
            nn_core.Dense(hidden, 1),
        ]
    return nn_core.Network.init(layers, seed, last_scale=0.01)


@dataclass
class DiscriminatorTraining:
    discriminator: NeuralDiscriminator
    checkpoints: list  # parameter vector after each epoch
    log: list = field(default_factory=list)

    def at_epoch(self, epoch: int) -> NeuralDiscriminator:
        return NeuralDiscriminator(self.discriminator.net.with_params(self.checkpoints[epoch]))


def _noised(x, sigmas, rng):
    return x + _per_row(sigmas, x) * rng.standard_normal(x.shape)


def train_discriminator(real, generated, schedule: NoiseSchedule, epochs: int, lr: float,
                        seed: int, batch_size: int = 128, net=None,
                        val_fraction: float = 0.1) -> DiscriminatorTraining:
    """Train a real(1)-vs-generated(0) classifier on noised copies of both sets.

    Every example gets a fresh noise level from the schedule's training
    distribution each epoch. A fixed noised validation split is scored after
    every epoch; all per-epoch parameter vectors are kept.
    """
    real = np.asarray(real, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if len(real) == 0 or len(generated) == 0:
        raise DataError("train_discriminator needs non-empty real and generated sets")
    if real.shape[1:] != generated.shape[1:]:
        raise ShapeError(f"real {real.shape[1:]} and generated {generated.shape[1:]} shapes differ")
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    rng = np.random.default_rng(seed)
    x = np.concatenate([real, generated])
    y = np.concatenate([np.ones(len(real)), np.zeros(len(generated))])
    order = rng.permutation(len(x))
    n_val = max(1, int(round(val_fraction * len(x)))) if len(x) > 1 else 0
    val_idx, tr_idx = order[:n_val], order[n_val:]
    if net is None:
        net = default_discriminator_net(real.shape[1:], seed=seed)
    disc = NeuralDiscriminator(net)
    val_rng = np.random.default_rng([seed, 1])
    val_sig = schedule.sample_training_sigmas(val_rng, len(val_idx))
    x_val = _noised(x[val_idx], val_sig, val_rng)

    state = nn_core.AdamState.fresh(net.params.size, lr)
    params = net.params.copy()
    checkpoints, log = [], []
    for epoch in range(epochs):
        losses = []
        for bi in nn_core.minibatches(len(tr_idx), batch_size, rng):
            idx = tr_idx[bi]
            sig = schedule.sample_training_sigmas(rng, len(idx))
            xb = _noised(x[idx], sig, rng)
            cur = net.with_params(params)
            inp = append_noise_embedding(xb, c_noise(sig))
            out, caches = nn_core.run_forward(cur, inp, train=True, rng=rng)
            loss, g = nn_core.bce_with_logits(out, y[idx])
            grad, _ = nn_core.run_backward(cur, caches, g.reshape(out.shape))
            params, state = nn_core.adam_step(params, grad, state)
            losses.append(loss)
        disc = NeuralDiscriminator(net.with_params(params))
        acc = float("nan")
        if len(val_idx):
            pred = disc.logit(x_val, val_sig) > 0
            acc = float(np.mean(pred == (y[val_idx] > 0.5)))
        checkpoints.append(params.copy())
        log.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_accuracy": acc})
    return DiscriminatorTraining(disc, checkpoints, log)


def select_best(fids) -> int:
    """Index of the smallest FID; ties go to the earliest epoch."""
    fids = list(fids)
    if not fids:
        raise ValueError("need at least one checkpoint")
    return int(np.argmin(fids))


def epoch_selection(checkpoints, denoiser: Denoiser, schedule: NoiseSchedule, cfg: GuidanceConfig,
                    context, n: int, seed: int, steps: int = 30, method: str = "heun", shape=None):
    """Guided FID for each checkpointed discriminator; returns (best index, table).

    Every checkpoint samples from the same seed so the comparison is paired.
    """
    from .samplers import sample

    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    table = []
    for epoch, disc in enumerate(checkpoints):
        run = sample(method, denoiser, schedule, steps, n, seed, disc, cfg, shape)
        table.append({"epoch": epoch, "fid": context.fid(run.samples)})
    return select_best(r["fid"] for r in table), table


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def save_discriminator(path, disc: NeuralDiscriminator, sidecar: dict) -> None:
    path = Path(path)
    nn_core.save_network(path, disc.net)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")


def load_discriminator(path) -> tuple[NeuralDiscriminator, dict]:
    path = Path(path)
    side = path.with_suffix(path.suffix + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return NeuralDiscriminator(nn_core.load_network(path)), meta
