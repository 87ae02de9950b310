"""Minimal trainable network kernel: layers over a flat parameter vector,
hand-written backward passes, BCE/MSE losses and Adam.

Everything runs in float64. A network is an ordered list of layer
descriptors plus one parameter vector; each layer reads its weights from a
slice of that vector, so the optimiser only ever sees a single array.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, ShapeError

BCE_EPS = 1e-7
NORM_EPS = 1e-5

# ---------------------------------------------------------------------------
# Layer descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    kind = "dense"

    @property
    def n_params(self) -> int:
        return self.in_features * self.out_features + self.out_features

    def init(self, rng: np.random.Generator) -> np.ndarray:
        w = rng.standard_normal((self.in_features, self.out_features))
        w *= np.sqrt(1.0 / self.in_features)
        return np.concatenate([w.ravel(), np.zeros(self.out_features)])

    def _split(self, p):
        k = self.in_features * self.out_features
        return p[:k].reshape(self.in_features, self.out_features), p[k:]

    def check(self, shape):
        if len(shape) != 2 or shape[1] != self.in_features:
            return f"expected (n, {self.in_features}), got {shape}"
        return None

    def forward(self, p, x, train, rng):
        w, b = self._split(p)
        return x @ w + b, x

    def backward(self, p, x, gy):
        w, _ = self._split(p)
        gw = x.T @ gy
        gb = gy.sum(axis=0)
        return np.concatenate([gw.ravel(), gb]), gy @ w.T


@dataclass(frozen=True)
class Conv:
    """2-D convolution with 'same' zero padding; output size ceil(H/stride)."""

    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1

    kind = "conv"

    @property
    def n_params(self) -> int:
        return self.out_ch * self.in_ch * self.kernel**2 + self.out_ch

    def init(self, rng):
        fan_in = self.in_ch * self.kernel**2
        w = rng.standard_normal((self.out_ch, self.in_ch, self.kernel, self.kernel))
        w *= np.sqrt(2.0 / fan_in)
        return np.concatenate([w.ravel(), np.zeros(self.out_ch)])

    def _split(self, p):
        k = self.out_ch * self.in_ch * self.kernel**2
        return p[:k].reshape(self.out_ch, self.in_ch, self.kernel, self.kernel), p[k:]

    def check(self, shape):
        if len(shape) != 4 or shape[1] != self.in_ch:
            return f"expected (n, {self.in_ch}, h, w), got {shape}"
        return None

    def _pad(self, x):
        k = self.kernel
        lo = (k - 1) // 2
        return np.pad(x, ((0, 0), (0, 0), (lo, k - 1 - lo), (lo, k - 1 - lo)))

    def forward(self, p, x, train, rng):
        w, b = self._split(p)
        s = self.stride
        win = sliding_window_view(self._pad(x), (self.kernel, self.kernel), axis=(2, 3))
        win = win[:, :, ::s, ::s]  # (n, c, ho, wo, k, k)
        y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (n, ho, wo, o)
        y = y.transpose(0, 3, 1, 2) + b[None, :, None, None]
        return np.ascontiguousarray(y), x

    def backward(self, p, x, gy):
        w, _ = self._split(p)
        s, k = self.stride, self.kernel
        xp = self._pad(x)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        gw = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # (o, c, k, k)
        gb = gy.sum(axis=(0, 2, 3))
        gxp = np.zeros_like(xp)
        ho, wo = gy.shape[2], gy.shape[3]
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(gy, w[:, :, i, j], axes=([1], [0]))  # (n, ho, wo, c)
                gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += contrib.transpose(0, 3, 1, 2)
        lo = (k - 1) // 2
        gx = gxp[:, :, lo : lo + x.shape[2], lo : lo + x.shape[3]]
        return np.concatenate([gw.ravel(), gb]), np.ascontiguousarray(gx)


@dataclass(frozen=True)
class Activation:
    name: str = "relu"

    kind = "activation"
    n_params = 0

    def __post_init__(self):
        if self.name not in ("relu", "silu", "sigmoid", "tanh", "identity"):
            raise ValueError(f"unknown activation {self.name!r}")

    def init(self, rng):
        return np.zeros(0)

    def check(self, shape):
        return None

    def forward(self, p, x, train, rng):
        if self.name == "relu":
            return np.maximum(x, 0.0), x
        if self.name == "sigmoid":
            y = _sigmoid(x)
            return y, y
        if self.name == "silu":
            sg = _sigmoid(x)
            return x * sg, (x, sg)
        if self.name == "tanh":
            y = np.tanh(x)
            return y, y
        return x, None

    def backward(self, p, cache, gy):
        empty = np.zeros(0)
        if self.name == "relu":
            return empty, gy * (cache > 0)
        if self.name == "sigmoid":
            return empty, gy * cache * (1.0 - cache)
        if self.name == "silu":
            x, sg = cache
            return empty, gy * (sg * (1.0 + x * (1.0 - sg)))
        if self.name == "tanh":
            return empty, gy * (1.0 - cache**2)
        return empty, gy


@dataclass(frozen=True)
class Dropout:
    """Inverted dropout: train-time survivors are scaled by 1/(1-rate)."""

    rate: float = 0.05

    kind = "dropout"
    n_params = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")

    def init(self, rng):
        return np.zeros(0)

    def check(self, shape):
        return None

    def forward(self, p, x, train, rng):
        if not train or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, p, mask, gy):
        return np.zeros(0), gy if mask is None else gy * mask


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"
    n_params = 0

    def init(self, rng):
        return np.zeros(0)

    def check(self, shape):
        return None

    def forward(self, p, x, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, shape, gy):
        return np.zeros(0), gy.reshape(shape)


@dataclass(frozen=True)
class Norm:
    """Per-sample normalisation over all non-batch axes, per-channel affine."""

    channels: int

    kind = "norm"

    @property
    def n_params(self) -> int:
        return 2 * self.channels

    def init(self, rng):
        return np.concatenate([np.ones(self.channels), np.zeros(self.channels)])

    def check(self, shape):
        if len(shape) < 2 or shape[1] != self.channels:
            return f"expected {self.channels} channels, got {shape}"
        return None

    def _bcast(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, p, x, train, rng):
        axes = tuple(range(1, x.ndim))
        mu = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (x - mu) * inv
        g, b = p[: self.channels], p[self.channels :]
        return xhat * self._bcast(g, x.ndim) + self._bcast(b, x.ndim), (xhat, inv)

    def backward(self, p, cache, gy):
        xhat, inv = cache
        axes = tuple(range(1, xhat.ndim))
        red = (0,) + tuple(range(2, xhat.ndim))
        g = p[: self.channels]
        gg = (gy * xhat).sum(axis=red)
        gb = gy.sum(axis=red)
        gxhat = gy * self._bcast(g, xhat.ndim)
        gx = inv * (
            gxhat
            - gxhat.mean(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
        )
        return np.concatenate([gg, gb]), gx


@dataclass(frozen=True)
class GlobalPool:
    """Spatial mean: (n, c, h, w) -> (n, c)."""

    kind = "pool"
    n_params = 0

    def init(self, rng):
        return np.zeros(0)

    def check(self, shape):
        if len(shape) != 4:
            return f"expected (n, c, h, w), got {shape}"
        return None

    def forward(self, p, x, train, rng):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, p, shape, gy):
        n, c, h, w = shape
        return np.zeros(0), np.broadcast_to(gy[:, :, None, None] / (h * w), shape).copy()


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv, Activation, Dropout, Flatten, Norm, GlobalPool)}


def layer_to_record(layer) -> dict:
    return {"kind": layer.kind, **asdict(layer)}


def layer_from_record(rec: dict):
    rec = dict(rec)
    kind = rec.pop("kind")
    if kind not in LAYER_TYPES:
        raise DataError(f"unknown layer kind {kind!r}")
    return LAYER_TYPES[kind](**rec)


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


sigmoid = _sigmoid

# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class Network:
    layers: list
    params: np.ndarray
    _cache: Any = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        expected = sum(layer.n_params for layer in self.layers)
        if self.params.shape != (expected,):
            raise ShapeError(
                f"parameter vector has shape {self.params.shape}, layers need ({expected},)"
            )

    @classmethod
    def init(cls, layers, seed: int = 0, last_scale: float = 1.0) -> "Network":
        """He/LeCun-style random init; ``last_scale`` shrinks the final
        parametrised layer (small logits start near p=0.5)."""
        rng = np.random.default_rng(seed)
        chunks = [layer.init(rng) for layer in layers]
        last = max((i for i, layer in enumerate(layers) if layer.n_params), default=None)
        if last is not None:
            chunks[last] = chunks[last] * last_scale
        return cls(list(layers), np.concatenate(chunks) if chunks else np.zeros(0))

    @property
    def param_layout(self) -> list[tuple[int, int]]:
        out, start = [], 0
        for layer in self.layers:
            out.append((start, start + layer.n_params))
            start += layer.n_params
        return out

    def with_params(self, params: np.ndarray) -> "Network":
        return replace(self, params=np.array(params, dtype=np.float64), _cache=None)

    def __call__(self, x, mode: str = "eval", rng=None) -> np.ndarray:
        return run_forward(self, x, train=mode == "train", rng=rng)[0]


def _describe(i, layer):
    return f"layer {i} ({layer_to_record(layer)})"


def run_forward(net: Network, x, train: bool = False, rng=None):
    """Pure forward pass returning (output, caches); does not touch ``net``."""
    x = np.asarray(x, dtype=np.float64)
    caches = []
    for i, (layer, (a, b)) in enumerate(zip(net.layers, net.param_layout)):
        problem = layer.check(x.shape)
        if problem:
            raise ShapeError(f"{_describe(i, layer)}: {problem}")
        x, cache = layer.forward(net.params[a:b], x, train, rng)
        caches.append(cache)
    return x, caches


def run_backward(net: Network, caches, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Pure backward pass: (parameter gradient, input gradient)."""
    g = np.asarray(upstream, dtype=np.float64)
    grads = []
    for layer, (a, b), cache in zip(
        reversed(net.layers), reversed(net.param_layout), reversed(caches)
    ):
        gp, g = layer.backward(net.params[a:b], cache, g)
        grads.append(gp)
    flat = np.concatenate(grads[::-1]) if grads else np.zeros(0)
    return flat, g


def forward(net: Network, x, mode: str = "eval", rng=None) -> np.ndarray:
    """Forward pass that also caches intermediates on ``net`` for
    :func:`backward`. Eval mode never consumes randomness."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out, caches = run_forward(net, x, train=mode == "train", rng=rng)
    net._cache = (x, caches)
    return out


def backward(net: Network, x, upstream_grad, return_input_grad: bool = False):
    if net._cache is None or net._cache[0] is not x:
        raise RuntimeError("backward called without a cached forward pass for this input")
    gp, gx = run_backward(net, net._cache[1], upstream_grad)
    return (gp, gx) if return_input_grad else gp


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def bce_loss(predicted_probs, labels, eps: float = BCE_EPS):
    """Mean binary cross-entropy and its gradient w.r.t. the probabilities."""
    p = np.asarray(predicted_probs, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} and labels {y.shape} differ in length")
    pc = np.clip(p, eps, 1.0 - eps)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    grad = (pc - y) / (pc * (1.0 - pc)) / p.size
    grad[(p != pc)] = 0.0  # clamped region is flat
    return float(loss), grad


def bce_with_logits(logits, labels):
    """Numerically stable BCE on logits; gradient w.r.t. logits."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} and labels {y.shape} differ in length")
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    return float(loss), (_sigmoid(z) - y) / z.size


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, n: int, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(params, grads, state: AdamState):
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not (params.shape == grads.shape == state.first_moment.shape == state.second_moment.shape):
        raise ShapeError(
            f"adam: params {params.shape}, grads {grads.shape}, "
            f"moments {state.first_moment.shape} must agree"
        )
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new, replace(state, first_moment=m, second_moment=v, step_count=t)


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"DBNN"
VERSION = 1


def save_network(path, net: Network) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(net.layers))
    for layer in net.layers:
        rec = json.dumps(layer_to_record(layer), sort_keys=True).encode()
        out += struct.pack("<I", len(rec)) + rec
    out += struct.pack("<Q", net.params.size)
    out += net.params.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_network(path) -> Network:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a network checkpoint (bad magic)")
    try:
        version, n_layers = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        pos, layers = 12, []
        for _ in range(n_layers):
            (size,) = struct.unpack_from("<I", buf, pos)
            layers.append(layer_from_record(json.loads(buf[pos + 4 : pos + 4 + size])))
            pos += 4 + size
        (count,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
    except struct.error as exc:
        raise DataError(f"{path}: truncated checkpoint header") from exc
    if len(buf) - pos != 8 * count:
        raise DataError(f"{path}: payload holds {len(buf) - pos} bytes, expected {8 * count}")
    params = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return Network(layers, params)


def mlp(sizes, activation: str = "silu", dropout: float = 0.0) -> list:
    """Layer list for a plain MLP; no activation after the last layer."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if i < len(sizes) - 2:
            layers.append(Activation(activation))
            if dropout:
                layers.append(Dropout(dropout))
    return layers
