"""Layer primitives with hand-derived backward passes.

Feature maps are float arrays of shape ``(batch, channels, length)``; dense
inputs are ``(batch, features)``.  Parameters may be stored as float32, but
every forward and backward computation promotes to float64.

Each ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward(cache, upstream)`` returns the gradient with respect to the
input followed by the parameter gradients.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "relu", "softmax")
PROB_FLOOR = 1e-12


@dataclass
class ConvParams:
    kernels: np.ndarray  # (out_channels, in_channels, kernel_size)
    bias: np.ndarray  # (out_channels,)
    stride: int = 1
    activation: str = "identity"

    def __post_init__(self):
        if self.kernels.ndim != 3:
            raise ValueError("kernels must be (out_channels, in_channels, kernel_size)")
        if self.kernels.shape[2] % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {self.kernels.shape[2]}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ValueError("bias must have one entry per output channel")
        if self.activation not in ("identity", "relu"):
            raise ValueError(f"unsupported conv activation {self.activation!r}")


@dataclass
class LocalParams:
    kernels: np.ndarray  # (length, kernel_size)
    bias: np.ndarray  # (length,)

    def __post_init__(self):
        if self.kernels.ndim != 2 or self.kernels.shape[1] % 2 != 1:
            raise ValueError("local kernels must be (length, odd kernel_size)")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ValueError("local bias must have one entry per position")


@dataclass
class DenseParams:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be non-negative")


def out_length(length: int, stride: int) -> int:
    """Output length of a "same"-padded convolution in ceil mode."""
    return -(-length // stride)


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


# --- activations -----------------------------------------------------------


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_backward(z: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return upstream * (z > 0)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = _f64(z)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax along the last axis."""
    inner = np.sum(upstream * probs, axis=-1, keepdims=True)
    return probs * (upstream - inner)


def _activate(z, activation):
    if activation == "identity":
        return z
    if activation == "relu":
        return relu(z)
    if activation == "softmax":
        return softmax(z)
    raise ValueError(f"unknown activation {activation!r}")


def _activate_backward(z, out, upstream, activation):
    if activation == "identity":
        return upstream
    if activation == "relu":
        return relu_backward(z, upstream)
    return softmax_backward(out, upstream)


# --- shared / strided convolution -----------------------------------------


class ConvCache(NamedTuple):
    xp: np.ndarray
    pre: np.ndarray
    out: np.ndarray
    kernels: np.ndarray
    stride: int
    activation: str
    length: int


def conv1d_forward(x: np.ndarray, params: ConvParams):
    """Zero-padded 1D cross-correlation, output length ``ceil(L / stride)``.

    Output position ``o`` is centred on input bin ``o * stride``.
    """
    x = _f64(x)
    if x.ndim != 3:
        raise ValueError(f"expected (batch, channels, length), got shape {x.shape}")
    kernels = _f64(params.kernels)
    n_out, n_in, k = kernels.shape
    if x.shape[1] != n_in:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernels expect {n_in}")
    s = params.stride
    length = x.shape[2]
    lout = out_length(length, s)
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    span = s * (lout - 1) + 1
    pre = np.zeros((x.shape[0], n_out, lout))
    for t in range(k):
        pre += np.matmul(kernels[:, :, t], xp[:, :, t:t + span:s])
    pre += _f64(params.bias)[None, :, None]
    out = _activate(pre, params.activation)
    return out, ConvCache(xp, pre, out, kernels, s, params.activation, length)


def conv1d_backward(cache: ConvCache, upstream: np.ndarray):
    """Returns ``(grad_input, grad_kernels, grad_bias)``."""
    g = _f64(upstream)
    if g.shape != cache.pre.shape:
        raise ValueError(f"upstream shape {g.shape} does not match output {cache.pre.shape}")
    g = _activate_backward(cache.pre, cache.out, g, cache.activation)
    kernels = cache.kernels
    k = kernels.shape[2]
    s = cache.stride
    span = s * (g.shape[2] - 1) + 1
    gxp = np.zeros_like(cache.xp)
    gk = np.empty_like(kernels)
    for t in range(k):
        window = cache.xp[:, :, t:t + span:s]
        gk[:, :, t] = np.tensordot(g, window, axes=([0, 2], [0, 2]))
        gxp[:, :, t:t + span:s] += np.matmul(kernels[:, :, t].T, g)
    gb = g.sum(axis=(0, 2))
    pad = (k - 1) // 2
    gx = gxp[:, :, pad:pad + cache.length]
    return gx, gk, gb


# --- locally connected (unshared) convolution ------------------------------


class LocalCache(NamedTuple):
    xp: np.ndarray
    kernels: np.ndarray
    length: int


def local_forward(x: np.ndarray, params: LocalParams):
    """Single-channel stride-1 convolution with a separate window per position.

    Accepts ``(batch, length)`` or ``(batch, 1, length)``; returns the same rank.
    """
    x = _f64(x)
    squeeze = False
    if x.ndim == 3:
        if x.shape[1] != 1:
            raise ValueError("locally connected layer takes a single channel")
        x = x[:, 0, :]
        squeeze = True
    kernels = _f64(params.kernels)
    length, k = kernels.shape
    if x.shape[1] != length:
        raise ValueError(f"length mismatch: layer built for {length}, got {x.shape[1]}")
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad)))
    out = np.zeros((x.shape[0], length))
    for t in range(k):
        out += kernels[:, t] * xp[:, t:t + length]
    out += _f64(params.bias)
    if squeeze:
        out = out[:, None, :]
    return out, LocalCache(xp, kernels, length)


def local_backward(cache: LocalCache, upstream: np.ndarray):
    g = _f64(upstream)
    squeeze = g.ndim == 3
    if squeeze:
        g = g[:, 0, :]
    length = cache.length
    if g.shape[1] != length:
        raise ValueError("upstream length does not match the layer")
    k = cache.kernels.shape[1]
    gk = np.empty_like(cache.kernels)
    gxp = np.zeros_like(cache.xp)
    for t in range(k):
        gk[:, t] = np.sum(g * cache.xp[:, t:t + length], axis=0)
        gxp[:, t:t + length] += g * cache.kernels[:, t]
    gb = g.sum(axis=0)
    pad = (k - 1) // 2
    gx = gxp[:, pad:pad + length]
    if squeeze:
        gx = gx[:, None, :]
    return gx, gk, gb


# --- dense -----------------------------------------------------------------


class DenseCache(NamedTuple):
    x: np.ndarray
    in_shape: tuple
    weights: np.ndarray
    pre: np.ndarray
    out: np.ndarray
    activation: str


def dense_forward(x: np.ndarray, params: DenseParams, activation: str = "identity"):
    """``activation(W x + b)``; inputs of higher rank are flattened per sample."""
    x = _f64(x)
    in_shape = x.shape
    x2 = x.reshape(x.shape[0], -1)
    weights = _f64(params.weights)
    if x2.shape[1] != weights.shape[1]:
        raise ValueError(f"dimension mismatch: input {x2.shape[1]}, weights expect {weights.shape[1]}")
    pre = x2 @ weights.T + _f64(params.bias)
    out = _activate(pre, activation)
    return out, DenseCache(x2, in_shape, weights, pre, out, activation)


def dense_backward(cache: DenseCache, upstream: np.ndarray, *, wrt_logits: bool = False):
    """Set ``wrt_logits`` when ``upstream`` is already the pre-activation gradient."""
    g = _f64(upstream)
    if g.shape != cache.pre.shape:
        raise ValueError("upstream shape does not match the dense output")
    if not wrt_logits:
        g = _activate_backward(cache.pre, cache.out, g, cache.activation)
    gw = g.T @ cache.x
    gb = g.sum(axis=0)
    gx = (g @ cache.weights).reshape(cache.in_shape)
    return gx, gw, gb


# --- batch normalization ---------------------------------------------------


class BatchNormCache(NamedTuple):
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str
    running_mean: np.ndarray
    running_var: np.ndarray


def _bn_axes(x):
    return (0, 2) if x.ndim == 3 else (0,)


def _bn_shape(x, v):
    return v[None, :, None] if x.ndim == 3 else v[None, :]


def batchnorm_forward(x: np.ndarray, params: BatchNormParams, mode: str = "train"):
    """Per-channel normalization pooled over batch and length.

    In train mode the cache carries the updated running statistics
    ``momentum * old + (1 - momentum) * batch``; ``params`` is not modified.
    """
    x = _f64(x)
    gamma = _f64(params.gamma)
    beta = _f64(params.beta)
    eps = float(params.epsilon)
    axes = _bn_axes(x)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch normalization in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = float(params.momentum)
        new_mean = m * _f64(params.running_mean) + (1.0 - m) * mean
        new_var = m * _f64(params.running_var) + (1.0 - m) * var
    elif mode == "infer":
        mean = _f64(params.running_mean)
        var = _f64(params.running_var)
        new_mean, new_var = mean, var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_shape(x, mean)) * _bn_shape(x, inv_std)
    out = _bn_shape(x, gamma) * xhat + _bn_shape(x, beta)
    return out, BatchNormCache(xhat, inv_std, gamma, mode, new_mean, new_var)


def batchnorm_backward(cache: BatchNormCache, upstream: np.ndarray):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    g = _f64(upstream)
    xhat = cache.xhat
    axes = _bn_axes(g)
    ggamma = np.sum(g * xhat, axis=axes)
    gbeta = np.sum(g, axis=axes)
    dxhat = g * _bn_shape(g, cache.gamma)
    inv_std = _bn_shape(g, cache.inv_std)
    if cache.mode == "infer":
        return dxhat * inv_std, ggamma, gbeta
    m = g.size // g.shape[1]
    sum_d = _bn_shape(g, np.sum(dxhat, axis=axes))
    sum_dx = _bn_shape(g, np.sum(dxhat * xhat, axis=axes))
    gx = inv_std / m * (m * dxhat - sum_d - xhat * sum_dx)
    return gx, ggamma, gbeta


# --- dropout ---------------------------------------------------------------


def dropout(x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None = None):
    """Inverted dropout.  Returns ``(output, mask)``; ``mask`` is None in infer mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _f64(x)
    if mode == "infer" or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(mask, upstream):
    return upstream if mask is None else upstream * mask


# --- loss ------------------------------------------------------------------


def nll_loss(probs, labels, theta_norm_sq: float = 0.0, lam: float = 0.0, stats: Counter | None = None):
    """Mean negative log-likelihood plus ``lam * theta_norm_sq``.

    Returns ``(loss, grad_logits)`` where ``grad_logits = (probs - labels) / N``
    is the gradient of the data term with respect to the softmax inputs.
    The weight-decay gradient is left to the parameter update.
    """
    if lam < 0:
        raise ValueError("weight decay must be non-negative")
    probs = _f64(probs)
    labels = _f64(labels)
    if probs.shape != labels.shape:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} differ in shape")
    n = probs.shape[0]
    picked = np.sum(probs * labels, axis=1)
    low = picked < PROB_FLOOR
    if np.any(low):
        n_low = int(low.sum())
        logger.warning("clamped %d probabilities at the true label to %g", n_low, PROB_FLOOR)
        if stats is not None:
            stats["clamped"] += n_low
    data = -np.mean(np.log(np.maximum(picked, PROB_FLOOR))) if n else 0.0
    loss = float(data + lam * theta_norm_sq)
    grad = (probs - labels) / max(n, 1)
    return loss, grad
