"""Balanced accuracy and core-level majority voting."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

POSITIVE = 0  # class index reported as "positive"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    tn: int
    fp: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def p(self) -> int:
        return self.tp + self.fn

    @property
    def n(self) -> int:
        return self.tn + self.fp

    @property
    def total(self) -> int:
        return self.p + self.n

    @classmethod
    def from_labels(cls, truth, pred, positive: int = POSITIVE) -> "ConfusionCounts":
        truth = np.asarray(truth)
        pred = np.asarray(pred)
        if truth.shape != pred.shape:
            raise ValueError("truth and prediction lengths differ")
        pos = truth == positive
        hit = pred == truth
        return cls(int(np.sum(pos & hit)), int(np.sum(pos & ~hit)), int(np.sum(~pos & hit)), int(np.sum(~pos & ~hit)))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fn + other.fn, self.tn + other.tn, self.fp + other.fp)


def balanced_accuracy(counts: ConfusionCounts) -> float:
    """``(TP/P + TN/N) / 2``."""
    if counts.p == 0 or counts.n == 0:
        raise ValueError(f"balanced accuracy needs both classes present (P={counts.p}, N={counts.n})")
    return 0.5 * (counts.tp / counts.p + counts.tn / counts.n)


def balanced_accuracy_from_labels(truth, pred) -> float:
    """Mean per-class recall over the classes present in ``truth``.

    Equals :func:`balanced_accuracy` for two classes.
    """
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    classes = np.unique(truth)
    if classes.size == 0:
        raise ValueError("no evaluated units")
    return float(np.mean([np.mean(pred[truth == c] == c) for c in classes]))


def core_majority_vote(spot_pred, core_ids, stats: Counter | None = None):
    """Modal predicted class per core; exact ties go to the lowest class index.

    Returns ``(cores, votes, tallies)`` with cores sorted by id and
    ``tallies[i]`` the per-class spot counts of core ``i``.
    """
    spot_pred = np.asarray(spot_pred, dtype=np.int64)
    core_ids = np.asarray(core_ids)
    if spot_pred.shape != core_ids.shape:
        raise ValueError("need one core id per spot prediction")
    cores, inverse = np.unique(core_ids, return_inverse=True)
    n_cls = int(spot_pred.max()) + 1 if spot_pred.size else 1
    tallies = np.zeros((cores.size, n_cls), dtype=np.int64)
    np.add.at(tallies, (inverse, spot_pred), 1)
    if np.any(tallies.sum(axis=1) == 0):
        raise ValueError("core without spots")
    votes = np.argmax(tallies, axis=1)
    top = tallies.max(axis=1, keepdims=True)
    ties = int(np.sum((tallies == top).sum(axis=1) > 1))
    if ties:
        logger.debug("%d core votes tied; assigned to the lowest class index", ties)
        if stats is not None:
            stats["core_ties"] += ties
    return cores, votes, tallies


def core_labels(labels, core_ids):
    """The (unique) label of every core, ordered like :func:`core_majority_vote`."""
    cores, first = np.unique(np.asarray(core_ids), return_index=True)
    return np.asarray(labels)[first]
