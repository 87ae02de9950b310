"""Noise schedules, EDM preconditioning, denoisers and the EDM training loss.

Denoisers are callables ``d(x, sigma, stage=...)`` returning the posterior
mean estimate of clean data. ``stage`` is only meaningful for guided
wrappers; plain denoisers ignore it. Analytic denoisers also expose the exact
noisy-marginal ``score`` and ``log_density``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import nn_core
from .errors import ConfigError, DataError, NumericError

FIRST_ORDER = "first_order"
CORRECTION = "correction"

SIGMA_DATA = 0.5
P_MEAN = -1.2
P_STD = 1.2

# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

_DEFAULTS = {
    "edm": dict(sigma_min=0.002, sigma_max=80.0),
    "vp": dict(sigma_min=None, sigma_max=None),
    "ve": dict(sigma_min=0.02, sigma_max=100.0),
}


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "edm"
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    vp_beta_d: float = 19.9
    vp_beta_min: float = 0.1

    def __post_init__(self):
        if self.kind not in _DEFAULTS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigError(
                f"invalid schedule: need 0 < sigma_min < sigma_max, "
                f"got {self.sigma_min}, {self.sigma_max}"
            )

    @classmethod
    def edm(cls, **kw):
        return cls("edm", **kw)

    @classmethod
    def vp(cls, t_min: float = 1e-3, t_max: float = 1.0, beta_d: float = 19.9, beta_min: float = 0.1):
        sig = lambda t: math.sqrt(math.expm1(0.5 * beta_d * t * t + beta_min * t))  # noqa: E731
        return cls("vp", sig(t_min), sig(t_max), vp_beta_d=beta_d, vp_beta_min=beta_min)

    @classmethod
    def ve(cls, **kw):
        kw = {**_DEFAULTS["ve"], **kw}
        return cls("ve", **kw)

    # sigma(t) families -------------------------------------------------

    def sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "edm":
            return t
        if self.kind == "vp":
            return np.sqrt(np.expm1(0.5 * self.vp_beta_d * t**2 + self.vp_beta_min * t))
        return np.sqrt(t)

    def sigma_inv(self, sigma):
        s = np.asarray(sigma, dtype=np.float64)
        if self.kind == "edm":
            return s
        if self.kind == "vp":
            bd, bm = self.vp_beta_d, self.vp_beta_min
            return (np.sqrt(bm**2 + 2.0 * bd * np.log1p(s**2)) - bm) / bd
        return s**2

    def sample_training_sigmas(self, rng: np.random.Generator, n: int,
                               p_mean: float = P_MEAN, p_std: float = P_STD) -> np.ndarray:
        """Noise levels used to corrupt training examples."""
        if self.kind == "edm":
            return np.exp(p_mean + p_std * rng.standard_normal(n))
        if self.kind == "vp":
            t = rng.uniform(self.sigma_inv(self.sigma_min), self.sigma_inv(self.sigma_max), n)
            return self.sigma(t)
        return np.exp(rng.uniform(np.log(self.sigma_min), np.log(self.sigma_max), n))


def sigma_steps(schedule: NoiseSchedule, n_steps: int) -> np.ndarray:
    """Decreasing noise levels sigma_max .. sigma_min followed by a terminal 0."""
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    lo, hi = schedule.sigma_min, schedule.sigma_max
    if n_steps == 1:
        return np.array([hi, 0.0])
    frac = np.arange(n_steps) / (n_steps - 1)
    if schedule.kind == "edm":
        r = 1.0 / schedule.rho
        sig = (hi**r + frac * (lo**r - hi**r)) ** schedule.rho
    elif schedule.kind == "vp":
        t_hi, t_lo = schedule.sigma_inv(hi), schedule.sigma_inv(lo)
        sig = schedule.sigma(t_hi + frac * (t_lo - t_hi))
    else:
        sig = hi * (lo / hi) ** frac
    sig[0], sig[-1] = hi, lo
    return np.append(sig, 0.0)


# ---------------------------------------------------------------------------
# Preconditioning
# ---------------------------------------------------------------------------


def c_skip(sigma, sigma_data=SIGMA_DATA):
    return sigma_data**2 / (sigma**2 + sigma_data**2)


def c_out(sigma, sigma_data=SIGMA_DATA):
    return sigma * sigma_data / np.sqrt(sigma**2 + sigma_data**2)


def c_in(sigma, sigma_data=SIGMA_DATA):
    return 1.0 / np.sqrt(sigma**2 + sigma_data**2)


def c_noise(sigma):
    return np.log(sigma) / 4.0


def loss_weight(sigma, sigma_data=SIGMA_DATA):
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def _per_row(value, x):
    """Broadcast a scalar or (n,) array of per-row values against ``x``."""
    v = np.asarray(value, dtype=np.float64)
    if v.ndim == 0:
        return v
    return v.reshape((-1,) + (1,) * (x.ndim - 1))


def append_noise_embedding(x: np.ndarray, emb) -> np.ndarray:
    """Append the noise embedding as an extra feature (vectors) or constant
    channel (images)."""
    n = x.shape[0]
    emb = np.broadcast_to(np.asarray(emb, dtype=np.float64), (n,))
    if x.ndim == 2:
        return np.concatenate([x, emb[:, None]], axis=1)
    extra = np.broadcast_to(emb.reshape((n, 1) + (1,) * (x.ndim - 2)), (n, 1) + x.shape[2:])
    return np.concatenate([x, extra], axis=1)


def strip_noise_embedding(g: np.ndarray) -> np.ndarray:
    return g[:, :-1] if g.ndim == 2 else g[:, :-1, ...]


def precondition_apply(net: nn_core.Network, x, sigma, sigma_data: float = SIGMA_DATA,
                       mode: str = "eval", rng=None) -> np.ndarray:
    """c_skip·x + c_out·F(c_in·x, c_noise) for scalar or per-row sigma."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("precondition_apply needs sigma > 0")
    s = _per_row(sigma, x)
    inp = append_noise_embedding(c_in(s, sigma_data) * x, c_noise(np.asarray(sigma, dtype=np.float64)))
    out, _ = nn_core.run_forward(net, inp, train=mode == "train", rng=rng)
    return c_skip(s, sigma_data) * x + c_out(s, sigma_data) * out.reshape(x.shape)


# ---------------------------------------------------------------------------
# Denoisers
# ---------------------------------------------------------------------------


class Denoiser:
    """Base class; subclasses implement ``_denoise`` on validated input."""

    shape: tuple = ()

    def __call__(self, x, sigma, stage: str = FIRST_ORDER) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise NumericError("denoiser input contains non-finite values")
        if np.any(np.asarray(sigma) < 0):
            raise ValueError(f"sigma must be non-negative, got {sigma}")
        if np.all(np.asarray(sigma) == 0):
            return x.copy()
        return self._denoise(x, sigma)

    def score(self, x, sigma) -> np.ndarray:
        return score_from_denoiser(self, x, sigma)


def denoise(d: Denoiser, x, sigma, stage: str = FIRST_ORDER) -> np.ndarray:
    return d(x, sigma, stage=stage)


def score_from_denoiser(d: Denoiser, x, sigma, stage: str = FIRST_ORDER) -> np.ndarray:
    """Tweedie conversion (D(x; sigma) - x) / sigma^2."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("score conversion is singular at sigma = 0")
    x = np.asarray(x, dtype=np.float64)
    return (d(x, sigma, stage=stage) - x) / _per_row(sigma, x) ** 2


def _check_spd(cov, what):
    if not np.allclose(cov, np.swapaxes(cov, -1, -2), atol=1e-12, rtol=0):
        raise ConfigError(f"{what} is not symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ConfigError(f"{what} is not positive definite") from exc


def _as_cov(cov, d):
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim == 0:
        return float(cov) * np.eye(d)
    if cov.ndim == 1:
        return np.diag(cov)
    return cov


@dataclass(eq=False)
class GaussianDenoiser(Denoiser):
    """Exact posterior mean for data ~ N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray
    shape: tuple = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        d = self.mean.size
        self.cov = _as_cov(self.cov, d)
        if self.cov.shape != (d, d):
            raise ConfigError(f"covariance shape {self.cov.shape} does not match mean ({d},)")
        _check_spd(self.cov, "covariance")
        self.shape = tuple(self.shape) if self.shape else (d,)
        self._evals, self._evecs = np.linalg.eigh(self.cov)

    @property
    def dim(self):
        return self.mean.size

    def _flat(self, x):
        return x.reshape(x.shape[0], -1)

    def _denoise(self, x, sigma):
        xf = self._flat(x)
        a = self.cov + sigma**2 * np.eye(self.dim)
        # Sigma (Sigma + s^2 I)^{-1} (x - mu), via a symmetric solve
        sol = np.linalg.solve(a, (xf - self.mean).T)
        return (self.mean + (self.cov @ sol).T).reshape(x.shape)

    def score(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        xf = self._flat(x)
        u = self._evecs
        inv = 1.0 / (self._evals + sigma**2)
        return (-((xf - self.mean) @ u * inv) @ u.T).reshape(x.shape)

    def log_density(self, x, sigma):
        xf = self._flat(np.asarray(x, dtype=np.float64))
        ev = self._evals + sigma**2
        z = (xf - self.mean) @ self._evecs
        return -0.5 * (np.sum(z**2 / ev, axis=1) + np.sum(np.log(ev)) + self.dim * np.log(2 * np.pi))

    def marginal(self, sigma):
        return self.mean.copy(), self.cov + sigma**2 * np.eye(self.dim)

    def shifted(self, delta) -> "GaussianDenoiser":
        return GaussianDenoiser(self.mean + np.asarray(delta, dtype=np.float64).ravel(), self.cov, self.shape)

    def sample(self, n, rng):
        chol = np.linalg.cholesky(self.cov)
        z = rng.standard_normal((n, self.dim))
        return (self.mean + z @ chol.T).reshape((n,) + self.shape)


@dataclass(eq=False)
class GMMDenoiser(Denoiser):
    """Exact posterior mean for data from a Gaussian mixture."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    shape: tuple = None
    _chol_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k, d = self.means.shape
        covs = np.asarray(self.covs, dtype=np.float64)
        if covs.ndim <= 1:
            covs = np.broadcast_to(covs.reshape(-1, 1) if covs.ndim == 1 else covs, (k, d))
        if covs.ndim == 2:
            covs = np.stack([np.diag(c) for c in covs])
        self.covs = np.array(covs)
        if self.weights.shape != (k,) or self.covs.shape != (k, d, d):
            raise ConfigError("mixture weights/means/covariances disagree in size")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ConfigError("mixture weights must be positive and sum to 1")
        for i, c in enumerate(self.covs):
            _check_spd(c, f"component {i} covariance")
        self.shape = tuple(self.shape) if self.shape else (d,)

    @property
    def dim(self):
        return self.means.shape[1]

    def _chol(self, sigma):
        key = float(sigma)
        if key not in self._chol_cache:
            if len(self._chol_cache) > 4096:
                self._chol_cache.clear()
            a = self.covs + sigma**2 * np.eye(self.dim)
            chol = np.linalg.cholesky(a)
            logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
            self._chol_cache[key] = (a, chol, logdet)
        return self._chol_cache[key]

    def _parts(self, xf, sigma):
        """Per-component log weights·densities and whitened solves."""
        a, chol, logdet = self._chol(sigma)
        k, d = self.means.shape
        logp = np.empty((xf.shape[0], k))
        solves = []
        for j in range(k):
            diff = xf - self.means[j]
            z = np.linalg.solve(chol[j], diff.T)  # L^{-1}(x - mu)
            logp[:, j] = np.log(self.weights[j]) - 0.5 * (
                np.sum(z**2, axis=0) + logdet[j] + d * np.log(2 * np.pi)
            )
            solves.append(np.linalg.solve(chol[j].T, z).T)  # A^{-1}(x - mu)
        return logp, solves

    def log_density(self, x, sigma):
        xf = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        logp, _ = self._parts(xf, sigma)
        return logsumexp(logp, axis=1)

    def responsibilities(self, x, sigma):
        xf = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        logp, _ = self._parts(xf, sigma)
        return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))

    def _denoise(self, x, sigma):
        xf = x.reshape(x.shape[0], -1)
        logp, solves = self._parts(xf, sigma)
        r = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        out = np.zeros_like(xf)
        for j, sol in enumerate(solves):
            out += r[:, j : j + 1] * (self.means[j] + sol @ self.covs[j].T)
        return out.reshape(x.shape)

    def score(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        xf = x.reshape(x.shape[0], -1)
        logp, solves = self._parts(xf, sigma)
        r = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        out = np.zeros_like(xf)
        for j, sol in enumerate(solves):
            out -= r[:, j : j + 1] * sol
        return out.reshape(x.shape)

    def marginal(self, sigma):
        mean = self.weights @ self.means
        second = sum(
            w * (c + sigma**2 * np.eye(self.dim) + np.outer(m, m))
            for w, m, c in zip(self.weights, self.means, self.covs)
        )
        return mean, second - np.outer(mean, mean)

    def shifted(self, delta) -> "GMMDenoiser":
        delta = np.asarray(delta, dtype=np.float64).ravel()
        return GMMDenoiser(self.weights, self.means + delta, self.covs, self.shape)

    def sample(self, n, rng):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        chol = np.linalg.cholesky(self.covs)
        out = self.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)
        return out.reshape((n,) + self.shape)


@dataclass(eq=False)
class NeuralDenoiser(Denoiser):
    net: nn_core.Network
    sigma_data: float = SIGMA_DATA
    shape: tuple = None

    def _denoise(self, x, sigma):
        return precondition_apply(self.net, x, sigma, self.sigma_data)


# ---------------------------------------------------------------------------
# Training loss
# ---------------------------------------------------------------------------


def edm_train_loss(d: Denoiser, batch, rng: np.random.Generator, sigma=None, noise=None,
                   p_mean: float = P_MEAN, p_std: float = P_STD):
    """Weighted denoising loss mean_i lambda(s_i)·||D(x_i + s_i·e_i; s_i) - x_i||^2
    with log-normal noise levels. Returns (loss, parameter gradient).

    ``sigma`` / ``noise`` override the random draws (scalar or per-row sigma).
    """
    if not isinstance(d, NeuralDenoiser):
        raise TypeError("edm_train_loss needs a NeuralDenoiser")
    x = np.asarray(batch, dtype=np.float64)
    n = x.shape[0]
    if sigma is None:
        sigma = np.exp(p_mean + p_std * rng.standard_normal(n))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    eps = rng.standard_normal(x.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    s = _per_row(sigma, x)
    sd = d.sigma_data
    y = x + s * eps
    inp = append_noise_embedding(c_in(s, sd) * y, c_noise(sigma))
    out, caches = nn_core.run_forward(d.net, inp, train=True, rng=rng)
    den = c_skip(s, sd) * y + c_out(s, sd) * out.reshape(x.shape)
    resid = den - x
    lam = _per_row(loss_weight(sigma, sd), x)
    per_example = (lam * resid**2).reshape(n, -1).sum(axis=1)
    loss = float(per_example.mean())
    g_den = 2.0 * lam * resid / n
    g_out = (c_out(s, sd) * g_den).reshape(out.shape)
    grad, _ = nn_core.run_backward(d.net, caches, g_out)
    return loss, grad


def default_denoiser_net(shape, hidden=(64, 64), dropout: float = 0.0, seed: int = 0) -> nn_core.Network:
    """Small network for a NeuralDenoiser on vectors or images."""
    if len(shape) == 1:
        d = shape[0]
        return nn_core.Network.init(nn_core.mlp([d + 1, *hidden, d], "silu", dropout), seed)
    c = shape[0]
    layers = [nn_core.Conv(c + 1, hidden[0], 3)]
    prev = hidden[0]
    for h in hidden[1:]:
        layers += [nn_core.Activation("silu")]
        if dropout:
            layers.append(nn_core.Dropout(dropout))
        layers.append(nn_core.Conv(prev, h, 3))
        prev = h
    layers += [nn_core.Activation("silu"), nn_core.Conv(prev, c, 3)]
    return nn_core.Network.init(layers, seed)


def analytic_denoiser(spec: dict, shape=None) -> Denoiser:
    """Build an analytic denoiser from a plain parameter block."""
    if "weights" in spec:
        return GMMDenoiser(spec["weights"], spec["means"], spec["covs"], shape)
    if "mean" in spec:
        return GaussianDenoiser(spec["mean"], spec["cov"], shape)
    raise DataError("parameter block needs 'mean'/'cov' or 'weights'/'means'/'covs'")


def denoiser_params(d: Denoiser) -> dict:
    if isinstance(d, GaussianDenoiser):
        return {"mean": d.mean.tolist(), "cov": d.cov.tolist()}
    if isinstance(d, GMMDenoiser):
        return {"weights": d.weights.tolist(), "means": d.means.tolist(), "covs": d.covs.tolist()}
    raise TypeError("only analytic denoisers have a parameter block")
