"""Network assembly, forward/backward passes and checkpoints.

A network is described by an immutable :class:`NetworkSpec` (the layer list)
and a mutable-by-replacement :class:`NetworkState` holding the flat float32
parameter vector ``theta`` and the float64 batch-norm running statistics.

Residual layers follow ``conv -> BN -> ReLU -> ... -> conv -> BN``, add the
shortcut, then apply ReLU.  When the stride or channel count changes the
shortcut is a bias-free 1x1 strided convolution followed by BN.
"""
from __future__ import annotations

import functools
import hashlib
import json
import logging
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import kernels as K

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite values appeared during a forward pass or training."""


class CheckpointError(ValueError):
    pass


# --- layer descriptors -----------------------------------------------------


@dataclass(frozen=True)
class Residual:
    depth: int = 2
    kernel_size: int = 3
    stride: int = 1
    out_channels: int = 8
    kind: str = "residual"


@dataclass(frozen=True)
class Relu:
    kind: str = "relu"


@dataclass(frozen=True)
class LocallyConnected:
    kernel_size: int = 3
    kind: str = "local"


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.3
    kind: str = "dropout"


@dataclass(frozen=True)
class Dense:
    out_dim: int = 2
    activation: str = "softmax"
    kind: str = "dense"


Layer = Union[Residual, Relu, LocallyConnected, Dropout, Dense]
_DESCRIPTORS = {"residual": Residual, "relu": Relu, "local": LocallyConnected, "dropout": Dropout, "dense": Dense}


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_dim: int
    n_classes: int
    name: str = "isotopenet"
    batchnorm: bool = True
    local_batchnorm: bool = False
    post_add_relu: bool = True
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ValueError("the last layer must be a dense layer")
        last = self.layers[-1]
        if last.activation != "softmax" or last.out_dim != self.n_classes:
            raise ValueError(f"the last layer must be dense softmax with {self.n_classes} outputs")
        for layer in self.layers:
            if isinstance(layer, Residual) and layer.depth < 1:
                raise ValueError("residual layers need depth >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["layers"] = [asdict(layer) for layer in self.layers]
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "NetworkSpec":
        raw = dict(raw)
        layers = []
        for item in raw.pop("layers"):
            item = dict(item)
            layers.append(_DESCRIPTORS[item.pop("kind")](**item))
        return cls(layers=tuple(layers), **raw)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


# --- parameter layout ------------------------------------------------------


@dataclass(frozen=True)
class Slot:
    name: str
    offset: int
    shape: tuple
    kind: str  # weight | bias | gamma | beta | mean | var

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class NetworkState:
    theta: np.ndarray  # float32, all trainable parameters
    stats: np.ndarray  # float64, batch-norm running mean/var

    @property
    def total_params(self) -> int:
        return int(self.theta.size)

    def copy(self) -> "NetworkState":
        return NetworkState(self.theta.copy(), self.stats.copy())


class _Allocator:
    def __init__(self):
        self.params: list[Slot] = []
        self.stats: list[Slot] = []
        self._p = 0
        self._s = 0

    def param(self, name, shape, kind):
        slot = Slot(name, self._p, tuple(shape), kind)
        self.params.append(slot)
        self._p += slot.size
        return name

    def stat(self, name, shape, kind):
        slot = Slot(name, self._s, tuple(shape), kind)
        self.stats.append(slot)
        self._s += slot.size
        return name

    def batchnorm(self, prefix, channels):
        self.param(prefix + ".gamma", (channels,), "gamma")
        self.param(prefix + ".beta", (channels,), "beta")
        self.stat(prefix + ".mean", (channels,), "mean")
        self.stat(prefix + ".var", (channels,), "var")
        return prefix


# --- compiled layers -------------------------------------------------------


class _ResidualOp:
    def __init__(self, idx, desc: Residual, in_shape, spec: NetworkSpec, alloc: _Allocator):
        c_in, length = in_shape
        self.desc = desc
        self.spec = spec
        self.prefix = f"L{idx}"
        self.convs = []
        c = c_in
        for i in range(desc.depth):
            name = f"{self.prefix}.conv{i}"
            alloc.param(name + ".w", (desc.out_channels, c, desc.kernel_size), "weight")
            alloc.param(name + ".b", (desc.out_channels,), "bias")
            bn = alloc.batchnorm(f"{self.prefix}.bn{i}", desc.out_channels) if spec.batchnorm else None
            self.convs.append((name, desc.stride if i == 0 else 1, bn, c * desc.kernel_size))
            c = desc.out_channels
        self.project = desc.stride != 1 or c_in != desc.out_channels
        if self.project:
            alloc.param(f"{self.prefix}.proj.w", (desc.out_channels, c_in, 1), "weight")
            self.proj_bn = alloc.batchnorm(f"{self.prefix}.projbn", desc.out_channels) if spec.batchnorm else None
        self.out_shape = (desc.out_channels, K.out_length(length, desc.stride))
        self.fan_in = {f"{n}.w": f for n, _, _, f in self.convs}
        if self.project:
            self.fan_in[f"{self.prefix}.proj.w"] = c_in

    def forward(self, P, S, x, mode, rng):
        caches = []
        h = x
        depth = len(self.convs)
        new_stats = {}
        for i, (name, stride, bn, _) in enumerate(self.convs):
            h, cc = K.conv1d_forward(h, K.ConvParams(P[name + ".w"], P[name + ".b"], stride))
            bc = None
            if bn is not None:
                h, bc = K.batchnorm_forward(h, _bn_params(P, S, bn, self.spec), mode)
                new_stats[bn] = (bc.running_mean, bc.running_var)
            pre = None
            if i < depth - 1:
                pre = h
                h = K.relu(h)
            caches.append((cc, bc, pre))
        if self.project:
            w = P[f"{self.prefix}.proj.w"]
            s, pc = K.conv1d_forward(x, K.ConvParams(w, np.zeros(w.shape[0]), self.desc.stride))
            pbc = None
            if self.proj_bn is not None:
                s, pbc = K.batchnorm_forward(s, _bn_params(P, S, self.proj_bn, self.spec), mode)
                new_stats[self.proj_bn] = (pbc.running_mean, pbc.running_var)
        else:
            s, pc, pbc = x, None, None
        z = h + s
        out = K.relu(z) if self.spec.post_add_relu else z
        return out, (caches, pc, pbc, z), new_stats

    def backward(self, P, cache, g, grads):
        caches, pc, pbc, z = cache
        if self.spec.post_add_relu:
            g = K.relu_backward(z, g)
        gs = g
        for i in reversed(range(len(self.convs))):
            name, _, bn, _ = self.convs[i]
            cc, bc, pre = caches[i]
            if pre is not None:
                g = K.relu_backward(pre, g)
            if bc is not None:
                g, ggam, gbet = K.batchnorm_backward(bc, g)
                grads[bn + ".gamma"] = ggam
                grads[bn + ".beta"] = gbet
            g, gk, gb = K.conv1d_backward(cc, g)
            grads[name + ".w"] = gk
            grads[name + ".b"] = gb
        if self.project:
            if pbc is not None:
                gs, ggam, gbet = K.batchnorm_backward(pbc, gs)
                grads[self.proj_bn + ".gamma"] = ggam
                grads[self.proj_bn + ".beta"] = gbet
            gs, gk, _ = K.conv1d_backward(pc, gs)
            grads[f"{self.prefix}.proj.w"] = gk
        return g + gs


class _ReluOp:
    def __init__(self, idx, desc, in_shape, spec, alloc):
        self.out_shape = in_shape
        self.fan_in = {}

    def forward(self, P, S, x, mode, rng):
        return K.relu(x), x, {}

    def backward(self, P, cache, g, grads):
        return K.relu_backward(cache, g)


class _LocalOp:
    def __init__(self, idx, desc: LocallyConnected, in_shape, spec, alloc):
        c, length = in_shape
        if c != 1:
            raise ValueError(f"locally connected layer needs a single input channel, got {c}")
        self.prefix = f"L{idx}"
        self.spec = spec
        self.length = length
        alloc.param(self.prefix + ".w", (length, desc.kernel_size), "weight")
        alloc.param(self.prefix + ".b", (length,), "bias")
        self.bn = alloc.batchnorm(self.prefix + ".bn", 1) if spec.local_batchnorm else None
        self.out_shape = in_shape
        self.fan_in = {self.prefix + ".w": desc.kernel_size}

    def forward(self, P, S, x, mode, rng):
        out, lc = K.local_forward(x, K.LocalParams(P[self.prefix + ".w"], P[self.prefix + ".b"]))
        bc, new_stats = None, {}
        if self.bn is not None:
            out, bc = K.batchnorm_forward(out, _bn_params(P, S, self.bn, self.spec), mode)
            new_stats[self.bn] = (bc.running_mean, bc.running_var)
        return out, (lc, bc), new_stats

    def backward(self, P, cache, g, grads):
        lc, bc = cache
        if bc is not None:
            g, ggam, gbet = K.batchnorm_backward(bc, g)
            grads[self.bn + ".gamma"] = ggam
            grads[self.bn + ".beta"] = gbet
        g, gk, gb = K.local_backward(lc, g)
        grads[self.prefix + ".w"] = gk
        grads[self.prefix + ".b"] = gb
        return g


class _DropoutOp:
    def __init__(self, idx, desc: Dropout, in_shape, spec, alloc):
        self.rate = desc.rate
        self.out_shape = in_shape
        self.fan_in = {}

    def forward(self, P, S, x, mode, rng):
        out, mask = K.dropout(x, self.rate, mode, rng)
        return out, mask, {}

    def backward(self, P, cache, g, grads):
        return K.dropout_backward(cache, g)


class _DenseOp:
    def __init__(self, idx, desc: Dense, in_shape, spec, alloc):
        self.prefix = f"L{idx}"
        self.activation = desc.activation
        n_in = int(np.prod(in_shape))
        alloc.param(self.prefix + ".w", (desc.out_dim, n_in), "weight")
        alloc.param(self.prefix + ".b", (desc.out_dim,), "bias")
        self.out_shape = (desc.out_dim,)
        self.fan_in = {self.prefix + ".w": n_in}

    def forward(self, P, S, x, mode, rng):
        act = "identity" if self.activation == "softmax" else self.activation
        out, cache = K.dense_forward(x, K.DenseParams(P[self.prefix + ".w"], P[self.prefix + ".b"]), act)
        return out, cache, {}

    def backward(self, P, cache, g, grads):
        gx, gw, gb = K.dense_backward(cache, g)
        grads[self.prefix + ".w"] = gw
        grads[self.prefix + ".b"] = gb
        return gx


_OPS = {Residual: _ResidualOp, Relu: _ReluOp, LocallyConnected: _LocalOp, Dropout: _DropoutOp, Dense: _DenseOp}


def _bn_params(P, S, prefix, spec):
    return K.BatchNormParams(P[prefix + ".gamma"], P[prefix + ".beta"], S[prefix + ".mean"], S[prefix + ".var"],
                             spec.bn_momentum, spec.bn_epsilon)


@dataclass
class CompiledNetwork:
    spec: NetworkSpec
    ops: list
    shapes: list  # feature shape entering each layer, plus the output
    params: list
    stats: list
    n_params: int
    n_stats: int
    decay_mask: np.ndarray = field(repr=False)

    def views(self, theta: np.ndarray) -> dict:
        return {s.name: theta[s.offset:s.offset + s.size].reshape(s.shape) for s in self.params}

    def stat_views(self, stats: np.ndarray) -> dict:
        return {s.name: stats[s.offset:s.offset + s.size].reshape(s.shape) for s in self.stats}

    def flatten(self, grads: dict) -> np.ndarray:
        flat = np.zeros(self.n_params)
        for s in self.params:
            if s.name in grads:
                flat[s.offset:s.offset + s.size] = np.ravel(grads[s.name])
        return flat

    def param_counts(self) -> list[tuple[int, int]]:
        """``(layer index, parameter count)`` for every layer."""
        counts = Counter()
        for s in self.params:
            counts[int(s.name.split(".")[0][1:])] += s.size
        return [(i, counts.get(i, 0)) for i in range(len(self.ops))]


@functools.lru_cache(maxsize=32)
def compile_network(spec: NetworkSpec) -> CompiledNetwork:
    alloc = _Allocator()
    shape = (1, spec.input_dim)
    shapes, ops = [shape], []
    for idx, desc in enumerate(spec.layers):
        op = _OPS[type(desc)](idx, desc, shape, spec, alloc)
        ops.append(op)
        shape = op.out_shape
        shapes.append(shape)
    n_params = sum(s.size for s in alloc.params)
    n_stats = sum(s.size for s in alloc.stats)
    mask = np.zeros(n_params, dtype=bool)
    for s in alloc.params:
        if s.kind == "weight":
            mask[s.offset:s.offset + s.size] = True
    return CompiledNetwork(spec, ops, shapes, alloc.params, alloc.stats, n_params, n_stats, mask)


def init_state(spec: NetworkSpec, seed: int = 0) -> NetworkState:
    """He-normal weights (variance 2 / fan_in), zero biases, gamma 1, beta 0."""
    net = compile_network(spec)
    rng = np.random.default_rng(seed)
    theta = np.zeros(net.n_params, dtype=np.float64)
    fan_in = {}
    for op in net.ops:
        fan_in.update(op.fan_in)
    for s in net.params:
        seg = theta[s.offset:s.offset + s.size]
        if s.kind == "weight":
            seg[:] = rng.standard_normal(s.size) * np.sqrt(2.0 / fan_in[s.name])
        elif s.kind == "gamma":
            seg[:] = 1.0
    stats = np.zeros(net.n_stats)
    for s in net.stats:
        if s.kind == "var":
            stats[s.offset:s.offset + s.size] = 1.0
    return NetworkState(theta.astype(np.float32), stats)


# --- builders --------------------------------------------------------------


ISOTOPENET_RESIDUALS = (
    Residual(2, 3, 1, 8),
    Residual(2, 3, 5, 8),
    Residual(2, 3, 1, 8),
    Residual(2, 3, 3, 1),
)

# (out_channels, stride) per depth-2 residual block
RESIDUALNET_SCHEDULE = (
    (16, 1), (16, 2), (32, 1), (32, 2), (64, 1), (64, 2), (128, 1), (128, 2), (256, 1), (256, 2), (256, 1),
)


def isotopenet_spec(d: int, n_classes: int = 2, dropout: float = 0.3, **flags) -> NetworkSpec:
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if d < 16:
        raise ValueError(f"input dimension {d} is too small for two strided reductions")
    layers = ISOTOPENET_RESIDUALS + (Relu(), LocallyConnected(3), Dropout(dropout), Dense(n_classes))
    return NetworkSpec(layers, d, n_classes, name="isotopenet", **flags)


def build_isotopenet(d: int, n_classes: int = 2, seed: int = 0, **flags) -> tuple[NetworkSpec, NetworkState]:
    spec = isotopenet_spec(d, n_classes, **flags)
    state = init_state(spec, seed)
    logger.info("IsotopeNet d=%d C=%d: %d trainable parameters", d, n_classes, state.total_params)
    return spec, state


def residualnet_spec(d: int, n_classes: int = 2, schedule=RESIDUALNET_SCHEDULE, kernel_size: int = 3,
                     depth: int = 2, **flags) -> NetworkSpec:
    layers = []
    for item in schedule:
        if len(item) != 2 or item[0] < 1 or item[1] < 1:
            raise ValueError(f"schedule entries must be (out_channels >= 1, stride >= 1), got {item!r}")
        layers.append(Residual(depth, kernel_size, int(item[1]), int(item[0])))
    layers.append(Dense(n_classes))
    return NetworkSpec(tuple(layers), d, n_classes, name="residualnet", **flags)


def build_residualnet(d: int, n_classes: int = 2, seed: int = 0, schedule=RESIDUALNET_SCHEDULE,
                      **kwargs) -> tuple[NetworkSpec, NetworkState]:
    spec = residualnet_spec(d, n_classes, schedule, **kwargs)
    state = init_state(spec, seed)
    logger.info("ResidualNet d=%d C=%d: %d trainable parameters", d, n_classes, state.total_params)
    return spec, state


def local_length(spec: NetworkSpec) -> int:
    net = compile_network(spec)
    for op, shape in zip(net.ops, net.shapes):
        if isinstance(op, _LocalOp):
            return shape[1]
    raise ValueError("network has no locally connected layer")


# --- forward / backward ----------------------------------------------------


@dataclass
class ForwardTrace:
    mode: str
    caches: list
    probs: np.ndarray
    new_stats: dict


def forward(spec: NetworkSpec, state: NetworkState, batch, mode: str = "infer", rng=None):
    """Class probabilities ``(N, C)`` and the trace needed for backward.

    Train mode uses batch statistics and dropout; the running statistics it
    would commit are returned in ``trace.new_stats`` (see :func:`commit_stats`).
    """
    net = compile_network(spec)
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"input length {x.shape[1]} does not match network input {spec.input_dim}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and rng is None:
        rng = np.random.default_rng(0)
    P = net.views(state.theta.astype(np.float64))
    S = net.stat_views(state.stats)
    h = x[:, None, :]
    caches, new_stats = [], {}
    for li, op in enumerate(net.ops):
        h, cache, ns = op.forward(P, S, h, mode, rng)
        if not np.all(np.isfinite(h)):
            raise NumericalError(f"non-finite activations after layer {li} ({spec.layers[li].kind})")
        caches.append(cache)
        new_stats.update(ns)
    probs = K.softmax(h)
    return probs, ForwardTrace(mode, caches, probs, new_stats)


def _backprop(spec, state, trace: ForwardTrace, g_logits):
    net = compile_network(spec)
    P = net.views(state.theta.astype(np.float64))
    grads: dict = {}
    g = g_logits
    for op, cache in zip(reversed(net.ops), reversed(trace.caches)):
        g = op.backward(P, cache, g, grads)
    return net.flatten(grads), g[:, 0, :]


def data_gradient(spec, state, trace: ForwardTrace, labels) -> tuple[float, np.ndarray]:
    """Mean NLL of the traced batch and its gradient with respect to theta."""
    loss, g_logits = K.nll_loss(trace.probs, labels)
    grad, _ = _backprop(spec, state, trace, g_logits)
    return loss, grad


def backward_params(spec: NetworkSpec, state: NetworkState, trace: ForwardTrace, labels, lam: float = 0.0,
                    strict_decay: bool = False) -> np.ndarray:
    """Gradient of ``mean NLL + lam * ||theta_w||^2`` with respect to theta.

    Weight decay covers weights only, unless ``strict_decay`` extends it to
    every parameter.
    """
    if trace.mode != "train":
        raise ValueError("backward_params needs a train-mode trace")
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim == 1:
        labels = np.eye(spec.n_classes)[labels.astype(int)]
    _, grad = data_gradient(spec, state, trace, labels)
    if lam:
        grad += 2.0 * lam * decay_vector(spec, state, strict_decay)
    return grad


def decay_vector(spec, state, strict: bool = False) -> np.ndarray:
    theta = state.theta.astype(np.float64)
    if strict:
        return theta
    return np.where(compile_network(spec).decay_mask, theta, 0.0)


def backward_input(spec: NetworkSpec, state: NetworkState, x, j: int) -> np.ndarray:
    """Gradient of the class-``j`` probability with respect to every input bin.

    Uses infer mode (no dropout, running batch-norm statistics), so rows of a
    batch are independent.  Accepts one spectrum or a ``(N, d)`` batch.
    """
    if not 0 <= j < spec.n_classes:
        raise ValueError(f"class index {j} outside 0..{spec.n_classes - 1}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    probs, trace = forward(spec, state, x, "infer")
    onehot = np.zeros(spec.n_classes)
    onehot[j] = 1.0
    g_logits = probs[:, j:j + 1] * (onehot - probs)
    _, gx = _backprop(spec, state, trace, g_logits)
    return gx[0] if single else gx


def commit_stats(spec: NetworkSpec, state: NetworkState, trace: ForwardTrace) -> NetworkState:
    """State with the running statistics from a train-mode trace."""
    net = compile_network(spec)
    stats = state.stats.copy()
    views = net.stat_views(stats)
    for prefix, (mean, var) in trace.new_stats.items():
        views[prefix + ".mean"][...] = mean
        views[prefix + ".var"][...] = var
    return NetworkState(state.theta, stats)


def predict_proba(spec, state, X, batch_size: int = 512) -> np.ndarray:
    X = np.asarray(X)
    if X.shape[0] == 0:
        return np.zeros((0, spec.n_classes))
    return np.concatenate([forward(spec, state, X[i:i + batch_size], "infer")[0]
                           for i in range(0, X.shape[0], batch_size)])


def predict(spec, state, X, stats: Counter | None = None, batch_size: int = 512) -> np.ndarray:
    """Argmax class per row; exact ties go to the lowest class index."""
    probs = predict_proba(spec, state, X, batch_size)
    return argmax_lowest(probs, stats)


def argmax_lowest(probs, stats: Counter | None = None) -> np.ndarray:
    probs = np.asarray(probs)
    top = probs.max(axis=1, keepdims=True)
    ties = int(np.sum((probs == top).sum(axis=1) > 1))
    if ties:
        logger.debug("%d prediction ties broken toward the lowest class index", ties)
        if stats is not None:
            stats["prediction_ties"] += ties
    return np.argmax(probs, axis=1)


def receptive_field(spec: NetworkSpec, upto: int | None = None) -> list[int]:
    """Receptive field (input bins) after each layer ``0..upto``.

    Residual layers contribute their branch convolutions in order; dense
    layers have no finite receptive field.
    """
    if upto is None:
        upto = max(i for i, layer in enumerate(spec.layers) if not isinstance(layer, Dense))
    rf, jump = 1, 1
    out = []
    for i, layer in enumerate(spec.layers[:upto + 1]):
        if isinstance(layer, Dense):
            raise ValueError(f"layer {i} is dense; receptive field is undefined past it")
        if isinstance(layer, Residual):
            for c in range(layer.depth):
                rf += (layer.kernel_size - 1) * jump
                jump *= layer.stride if c == 0 else 1
        elif isinstance(layer, LocallyConnected):
            rf += (layer.kernel_size - 1) * jump
        out.append(rf)
    return out


# --- checkpoints -----------------------------------------------------------

MAGIC = b"ISNETCK1"
VERSION = 1


@dataclass
class OptimizerSnapshot:
    """Adam moments and the number of completed epochs, for resuming."""

    t: int
    epoch: int
    m: np.ndarray
    v: np.ndarray


def save_state(path, spec: NetworkSpec, state: NetworkState, optimizer: OptimizerSnapshot | None = None) -> Path:
    """Header (magic, version, spec hash, d, C), spec JSON, theta, stats, optional optimizer."""
    path = Path(path)
    spec_json = json.dumps(spec.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(spec.digest())
        fh.write(struct.pack("<II", spec.input_dim, spec.n_classes))
        fh.write(struct.pack("<Q", len(spec_json)))
        fh.write(spec_json)
        fh.write(struct.pack("<Q", state.theta.size))
        fh.write(state.theta.astype("<f4").tobytes())
        fh.write(struct.pack("<Q", state.stats.size))
        fh.write(state.stats.astype("<f8").tobytes())
        if optimizer is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<BQQ", 1, optimizer.t, optimizer.epoch))
            fh.write(optimizer.m.astype("<f8").tobytes())
            fh.write(optimizer.v.astype("<f8").tobytes())
    return path


def load_state(path, spec: NetworkSpec | None = None):
    """Returns ``(spec, state, optimizer_or_None)``; checks the spec hash."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a network checkpoint")
    pos = 8
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = data[pos:pos + 32]
    pos += 32
    d, C = struct.unpack_from("<II", data, pos)
    pos += 8
    (n_json,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    stored = NetworkSpec.from_dict(json.loads(data[pos:pos + n_json]))
    pos += n_json
    if stored.digest() != digest:
        raise CheckpointError("checkpoint spec does not match its stored hash")
    if spec is not None and spec.digest() != digest:
        raise CheckpointError("checkpoint was written for a different network spec")
    (n_theta,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    theta = np.frombuffer(data, dtype="<f4", count=n_theta, offset=pos).astype(np.float32)
    pos += 4 * n_theta
    (n_stats,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    stats = np.frombuffer(data, dtype="<f8", count=n_stats, offset=pos).astype(np.float64)
    pos += 8 * n_stats
    net = compile_network(stored)
    if n_theta != net.n_params or n_stats != net.n_stats or (d, C) != (stored.input_dim, stored.n_classes):
        raise CheckpointError("checkpoint arrays do not match the network layout")
    optimizer = None
    (flag,) = struct.unpack_from("<B", data, pos)
    pos += 1
    if flag:
        t, epoch = struct.unpack_from("<QQ", data, pos)
        pos += 16
        m = np.frombuffer(data, dtype="<f8", count=n_theta, offset=pos).copy()
        pos += 8 * n_theta
        v = np.frombuffer(data, dtype="<f8", count=n_theta, offset=pos).copy()
        optimizer = OptimizerSnapshot(int(t), int(epoch), m, v)
    return stored, NetworkState(theta, stats), optimizer
