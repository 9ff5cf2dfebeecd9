"""Mini-batch training with SGD or Adam."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import model as M
from .kernels import nll_loss
from .metrics import balanced_accuracy_from_labels

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    weight_decay: float = 0.05
    batch_size: int = 256
    epochs: int = 300
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout_rate: float = 0.3
    strict_decay: bool = False
    finalize_batchnorm: bool = True
    seed: int = 0

    def validate(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch normalization)")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "adsq": TrainConfig(weight_decay=0.05, epochs=300, batch_size=256),
    "lp": TrainConfig(weight_decay=0.01, epochs=30, batch_size=256),
}


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def minibatch_partition(n: int, batch_size: int, rng: np.random.Generator,
                        merge_singleton: bool = False) -> list[np.ndarray]:
    """Random disjoint cover of ``range(n)`` in batches of ``batch_size``.

    The last batch may be short.  With ``merge_singleton`` a trailing batch of
    one sample joins the previous batch, since batch norm needs two samples.
    """
    if n < 2:
        raise ValueError("need at least 2 samples for batch-normalized training")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if merge_singleton and len(batches) > 1 and batches[-1].size == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def sgd_step(theta, grad, lr: float) -> np.ndarray:
    theta = np.asarray(theta)
    grad = np.asarray(grad)
    if theta.shape != grad.shape:
        raise ValueError(f"shape mismatch: theta {theta.shape}, grad {grad.shape}")
    return (theta - lr * grad).astype(theta.dtype)


def adam_step(theta, grad, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; inputs are left untouched."""
    theta = np.asarray(theta)
    grad = np.asarray(grad, dtype=np.float64)
    if theta.shape != grad.shape or state.m.shape != grad.shape:
        raise ValueError("theta, grad and Adam moments must share a shape")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = theta.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new.astype(theta.dtype), AdamState(m, v, t)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    bal_acc: float
    seconds: float
    val_loss: float | None = None
    val_bal_acc: float | None = None


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    batch_losses: list[list[float]] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r.loss for r in self.epochs]

    def to_table(self, delimiter: str = "\t") -> str:
        head = ["epoch", "loss", "bal_acc", "seconds", "val_loss", "val_bal_acc"]
        lines = [delimiter.join(head)]
        for r in self.epochs:
            vals = [str(r.epoch), repr(float(r.loss)), repr(float(r.bal_acc)), f"{r.seconds:.3f}",
                    "" if r.val_loss is None else repr(float(r.val_loss)),
                    "" if r.val_bal_acc is None else repr(float(r.val_bal_acc))]
            lines.append(delimiter.join(vals))
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    state: M.NetworkState
    log: TrainLog
    optimizer: M.OptimizerSnapshot


def _epoch_rngs(seed: int, epoch: int):
    return np.random.default_rng([seed, epoch, 0]), np.random.default_rng([seed, epoch, 1])


def population_stats(spec: M.NetworkSpec, state: M.NetworkState, X, batch_size: int, seed: int = 0) -> M.NetworkState:
    """Replace running batch-norm statistics by population estimates.

    Averages the per-batch means and the unbiased per-batch variances of the
    train-mode network over one pass through ``X``.
    """
    net = M.compile_network(spec)
    if not net.stats:
        return state
    raw = replace(spec, bn_momentum=0.0)
    rng = np.random.default_rng([seed, 2**31])
    batches = minibatch_partition(X.shape[0], batch_size, rng, merge_singleton=True)
    sums: dict = {}
    for idx in batches:
        _, trace = M.forward(raw, state, X[idx], "train", rng)
        for prefix, (mean, var) in trace.new_stats.items():
            m = _bn_count(net, prefix, len(idx))
            acc = sums.setdefault(prefix, [0.0, 0.0])
            acc[0] = acc[0] + mean
            acc[1] = acc[1] + var * m / max(m - 1, 1)
    stats = state.stats.copy()
    views = net.stat_views(stats)
    for prefix, (mean_sum, var_sum) in sums.items():
        views[prefix + ".mean"][...] = mean_sum / len(batches)
        views[prefix + ".var"][...] = var_sum / len(batches)
    return M.NetworkState(state.theta, stats)


def _bn_count(net, prefix, batch):
    """Number of values pooled per channel by the batch-norm layer ``prefix``."""
    layer = int(prefix.split(".")[0][1:])
    return batch * net.shapes[layer + 1][-1] if len(net.shapes[layer + 1]) > 1 else batch


def train(spec: M.NetworkSpec, state: M.NetworkState, X, y, config: TrainConfig, validation=None, *,
          resume: M.OptimizerSnapshot | None = None, stop_epoch: int | None = None) -> TrainResult:
    """Fit ``state`` to TIC-normalized spectra ``X`` with integer labels ``y``.

    Every epoch draws a fresh permutation from ``(seed, epoch)``, so a run
    resumed from a checkpoint continues exactly as the uninterrupted run.
    ``validation`` is an optional ``(X_val, y_val)`` pair.
    """
    config.validate()
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y differ in length")
    onehot = np.eye(spec.n_classes)[y]
    lam = config.weight_decay
    net = M.compile_network(spec)
    mask = None if config.strict_decay else net.decay_mask

    start = 0
    adam = AdamState.zeros(state.total_params)
    if resume is not None:
        start = resume.epoch
        adam = AdamState(resume.m.copy(), resume.v.copy(), resume.t)
    end = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    state = state.copy()
    log = TrainLog()

    for epoch in range(start, end):
        tick = time.perf_counter()
        order_rng, drop_rng = _epoch_rngs(config.seed, epoch)
        batches = minibatch_partition(X.shape[0], config.batch_size, order_rng, merge_singleton=True)
        losses, preds = [], np.empty_like(y)
        for b, idx in enumerate(batches):
            probs, trace = M.forward(spec, state, X[idx], "train", drop_rng)
            data_loss, g_logits = nll_loss(probs, onehot[idx])
            theta64 = state.theta.astype(np.float64)
            decayed = theta64 if mask is None else np.where(mask, theta64, 0.0)
            loss = data_loss + lam * float(decayed @ decayed)
            if not np.isfinite(loss):
                raise M.NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            grad, _ = M._backprop(spec, state, trace, g_logits)
            if lam:
                grad += 2.0 * lam * decayed
            if config.optimizer == "adam":
                theta, adam = adam_step(state.theta, grad, adam, config.learning_rate,
                                        config.beta1, config.beta2, config.adam_eps)
            else:
                theta = sgd_step(state.theta, grad, config.learning_rate)
            state = M.commit_stats(spec, M.NetworkState(theta, state.stats), trace)
            losses.append(loss)
            preds[idx] = np.argmax(probs, axis=1)
        if config.finalize_batchnorm and epoch + 1 == config.epochs:
            state = population_stats(spec, state, X, config.batch_size, config.seed)
        record = EpochRecord(epoch + 1, float(np.mean(losses)), balanced_accuracy_from_labels(y, preds),
                             time.perf_counter() - tick)
        if validation is not None:
            Xv, yv = validation
            scored = state
            if config.finalize_batchnorm and epoch + 1 < config.epochs:
                scored = population_stats(spec, state, X, config.batch_size, config.seed)
            pv = M.predict_proba(spec, scored, Xv)
            record.val_loss, _ = nll_loss(pv, np.eye(spec.n_classes)[np.asarray(yv)])
            record.val_bal_acc = balanced_accuracy_from_labels(yv, np.argmax(pv, axis=1))
        log.epochs.append(record)
        log.batch_losses.append(losses)
        logger.debug("epoch %d loss %.4f bal_acc %.4f", record.epoch, record.loss, record.bal_acc)

    snapshot = M.OptimizerSnapshot(adam.t, end, adam.m, adam.v)
    return TrainResult(state, log, snapshot)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
