"""Deterministic probability-flow samplers (Euler, Heun) with NFE accounting
and the FID-vs-NFE sweep."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .diffusion_core import CORRECTION, FIRST_ORDER, Denoiser, NoiseSchedule, sigma_steps
from .errors import ConfigError

NOISE_BLOCK = 256
SWEEP_COLUMNS = ("steps", "nfe", "fid", "n_samples", "seed")


@dataclass
class SamplerRun:
    steps: int
    nfe: int
    seed: int
    schedule: NoiseSchedule
    guidance: Optional[object]
    samples: np.ndarray
    method: str = "heun"


def nfe_for(steps: int, method: str = "heun") -> int:
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if method == "heun":
        return 2 * steps - 1
    if method == "euler":
        return steps
    raise ConfigError(f"unknown sampler method {method!r}")


def block_generator(seed: int, block: int) -> np.random.Generator:
    """Counter-based stream for one block of chains."""
    return np.random.Generator(np.random.Philox(key=[seed % 2**64, block]))


def initial_noise(seed: int, n: int, shape) -> np.ndarray:
    """Unit Gaussian noise for chains 0..n-1.

    Chain i's noise depends only on (seed, i), so changing n or splitting the
    work into batches never changes an individual chain.
    """
    shape = tuple(shape)
    blocks = []
    for b in range(-(-n // NOISE_BLOCK)):
        blocks.append(block_generator(seed, b).standard_normal((NOISE_BLOCK,) + shape))
    if not blocks:
        return np.zeros((0,) + shape)
    return np.concatenate(blocks)[:n]


def _resolve_shape(d, shape):
    shape = shape or getattr(d, "shape", None)
    if not shape:
        raise ConfigError("sample shape unknown: pass shape= for this denoiser")
    return tuple(shape)


def _maybe_guided(d, discriminator, guidance):
    if guidance is None or discriminator is None:
        return d
    from .guidance import guided_denoiser

    return guided_denoiser(d, discriminator, guidance)


def integrate(d, sigmas, x, method: str = "heun"):
    """Run the probability-flow ODE over ``sigmas`` from state ``x``.

    Returns (final state, number of denoiser evaluations).
    """
    nfe = 0
    for s, s_next in zip(sigmas[:-1], sigmas[1:]):
        slope = (x - d(x, s, stage=FIRST_ORDER)) / s
        nfe += 1
        x_next = x + (s_next - s) * slope
        if method == "heun" and s_next > 0:
            slope2 = (x_next - d(x_next, s_next, stage=CORRECTION)) / s_next
            nfe += 1
            x_next = x + (s_next - s) * 0.5 * (slope + slope2)
        x = x_next
    return x, nfe


def _sample(method, d, schedule, steps, n, seed, discriminator, guidance, shape):
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    shape = _resolve_shape(d, shape)
    sigmas = sigma_steps(schedule, steps)
    x = sigmas[0] * initial_noise(seed, n, shape)
    x, nfe = integrate(_maybe_guided(d, discriminator, guidance), sigmas, x, method)
    return SamplerRun(steps, nfe, seed, schedule, guidance, x, method)


def sample_heun(d: Denoiser, schedule: NoiseSchedule, steps: int, n: int, seed: int,
                discriminator=None, guidance=None, shape=None) -> SamplerRun:
    """Second-order deterministic sampler; the final step to sigma=0 is Euler."""
    return _sample("heun", d, schedule, steps, n, seed, discriminator, guidance, shape)


def sample_euler(d: Denoiser, schedule: NoiseSchedule, steps: int, n: int, seed: int,
                 discriminator=None, guidance=None, shape=None) -> SamplerRun:
    return _sample("euler", d, schedule, steps, n, seed, discriminator, guidance, shape)


def sample(method: str, d: Denoiser, schedule: NoiseSchedule, steps: int, n: int, seed: int,
           discriminator=None, guidance=None, shape=None) -> SamplerRun:
    if method not in ("heun", "euler"):
        raise ConfigError(f"unknown sampler method {method!r}")
    return _sample(method, d, schedule, steps, n, seed, discriminator, guidance, shape)


def fid_vs_nfe_sweep(d: Denoiser, schedule: NoiseSchedule, step_list, n: int, seed: int,
                     context, method: str = "heun", discriminator=None, guidance=None,
                     shape=None) -> list[dict]:
    """FID at each step count in ``step_list``.

    ``context`` is a :class:`echolab.metrics_fid.FIDContext` holding the
    pinned real statistics. Every entry draws its initial noise from the same
    seed, so rows differ only through the discretisation.
    """
    step_list = list(step_list)
    if not step_list:
        raise ConfigError("step_list must be non-empty")
    rows = []
    for steps in step_list:
        run = sample(method, d, schedule, int(steps), n, seed, discriminator, guidance, shape)
        rows.append({
            "steps": int(steps),
            "nfe": run.nfe,
            "fid": context.fid(run.samples),
            "n_samples": n,
            "seed": seed,
        })
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(float(row[k])) if k == "fid" else row[k]) for k in SWEEP_COLUMNS})
    return buf.getvalue()
