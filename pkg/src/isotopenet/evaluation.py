"""Fold evaluation, repeated cross-validation and reporting."""
from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import Dataset, FoldPlan
from .metrics import ConfusionCounts, balanced_accuracy, core_labels, core_majority_vote
from .training import TrainConfig, train

logger = logging.getLogger(__name__)


class LeakageError(AssertionError):
    """A test spectrum was used during fitting."""


class LeakageAudit:
    """Records which spectrum ids each fitting stage touched."""

    def __init__(self):
        self.touched: dict[str, set[int]] = {}

    def record(self, stage: str, ids):
        self.touched.setdefault(stage, set()).update(int(i) for i in np.asarray(ids).ravel())

    def digest(self, stage: str | None = None) -> str:
        ids = self.all_ids() if stage is None else self.touched.get(stage, set())
        return hashlib.sha256(np.array(sorted(ids), dtype="<i8").tobytes()).hexdigest()

    def all_ids(self) -> set[int]:
        return set().union(*self.touched.values()) if self.touched else set()

    def check(self, test_ids):
        test = {int(i) for i in np.asarray(test_ids).ravel()}
        for stage, ids in self.touched.items():
            shared = ids & test
            if shared:
                raise LeakageError(f"{len(shared)} test spectra (e.g. id {min(shared)}) were used by {stage}")


# --- methods ---------------------------------------------------------------


@dataclass
class FittedNetwork:
    spec: M.NetworkSpec
    state: M.NetworkState
    log: object = None
    train_ids: np.ndarray | None = None

    def predict(self, spectra, stats: Counter | None = None) -> np.ndarray:
        return M.predict(self.spec, self.state, spectra, stats)


@dataclass
class NetworkMethod:
    """Builds and trains IsotopeNet or a ResidualNet for each fold."""

    arch: str = "isotopenet"
    config: TrainConfig = field(default_factory=TrainConfig)
    schedule: tuple | None = None
    name: str = ""

    def __post_init__(self):
        if self.arch not in ("isotopenet", "residualnet"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        self.name = self.name or self.arch

    def build(self, d: int, n_classes: int, seed: int):
        if self.arch == "isotopenet":
            return M.build_isotopenet(d, n_classes, seed, dropout=self.config.dropout_rate)
        kw = {} if self.schedule is None else {"schedule": self.schedule}
        return M.build_residualnet(d, n_classes, seed, **kw)

    def fit(self, train_set: Dataset, seed: int, audit: LeakageAudit | None = None) -> FittedNetwork:
        if audit is not None:
            audit.record("training", train_set.ids)
        spec, state = self.build(train_set.d, train_set.meta.n_classes, seed)
        cfg = TrainConfig(**{**self.config.to_dict(), "seed": int(seed)})
        result = train(spec, state, train_set.spectra, train_set.labels, cfg)
        return FittedNetwork(spec, result.state, result.log, train_set.ids.copy())


# --- evaluation ------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    spot: ConfusionCounts
    core: ConfusionCounts
    spot_pred: np.ndarray
    test_index: np.ndarray
    core_ids: np.ndarray
    core_tallies: np.ndarray
    ties: Counter

    @property
    def spot_bal_acc(self) -> float:
        return balanced_accuracy(self.spot)

    @property
    def core_bal_acc(self) -> float:
        return balanced_accuracy(self.core)


def evaluate_predictions(test: Dataset, spot_pred, stats: Counter | None = None):
    """Spot and majority-voted core confusion counts for predictions on ``test``."""
    stats = Counter() if stats is None else stats
    spot = ConfusionCounts.from_labels(test.labels, spot_pred)
    cores, votes, tallies = core_majority_vote(spot_pred, test.meta.core_id, stats)
    core = ConfusionCounts.from_labels(core_labels(test.labels, test.meta.core_id), votes)
    return spot, core, cores, tallies


def evaluate_fold(fitted, dataset: Dataset, plan: FoldPlan, fold: int,
                  audit: LeakageAudit | None = None) -> FoldResult:
    """Score ``fitted`` (anything with ``predict(spectra, stats)``) on the fold's test TMAs."""
    _, test_idx = plan.split(dataset.meta, fold)
    test = dataset.subset(test_idx)
    if audit is not None:
        audit.check(test.ids)
    train_ids = getattr(fitted, "train_ids", None)
    if train_ids is not None and np.intersect1d(train_ids, test.ids).size:
        raise LeakageError("model was trained on spectra of the test fold")
    stats: Counter = Counter()
    pred = fitted.predict(test.spectra, stats)
    spot, core, cores, tallies = evaluate_predictions(test, pred, stats)
    return FoldResult(fold, spot, core, np.asarray(pred), test_idx, cores, tallies, stats)


def derive_seed(master: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(master), *map(int, path)]).generate_state(1)[0])


def iqr(values) -> float:
    q75, q25 = np.percentile(np.asarray(values, dtype=np.float64), [75, 25])
    return float(q75 - q25)


@dataclass
class CvReport:
    method: str
    n_folds: int
    n_runs: int
    folds: list[list[FoldResult]]  # [run][fold]
    run_spot: list[float]  # balanced accuracy of each run's pooled test predictions
    run_core: list[float]
    models: list[list] | None = None

    @property
    def median_spot(self) -> float:
        return float(np.median(self.run_spot))

    @property
    def median_core(self) -> float:
        return float(np.median(self.run_core))

    @property
    def iqr_spot(self) -> float:
        return iqr(self.run_spot)

    @property
    def iqr_core(self) -> float:
        return iqr(self.run_core)

    def rows(self) -> list[dict]:
        out = []
        for r, run in enumerate(self.folds):
            for res in run:
                out.append({"run": r, "fold": res.fold, "level": "spot", "balanced_accuracy": res.spot_bal_acc})
                out.append({"run": r, "fold": res.fold, "level": "core", "balanced_accuracy": res.core_bal_acc})
        return out

    def fold_values(self, level: str = "spot") -> np.ndarray:
        """``(runs, folds)`` balanced accuracies."""
        attr = "spot_bal_acc" if level == "spot" else "core_bal_acc"
        return np.array([[getattr(res, attr) for res in run] for run in self.folds])

    def best(self) -> tuple[int, int]:
        """Best run by pooled spot accuracy, then its best fold."""
        run = int(np.argmax(self.run_spot))
        fold = int(np.argmax(self.fold_values("spot")[run]))
        return run, fold

    def to_table(self, delimiter: str = "\t") -> str:
        lines = [delimiter.join(["run", "fold", "level", "balanced_accuracy"])]
        for row in self.rows():
            lines.append(delimiter.join([str(row["run"]), str(row["fold"]), row["level"], repr(float(row["balanced_accuracy"]))]))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        head = f"{'Method':<14}{'Bal. Accur. (Spot)':>20}{'Bal. Accur. (Core)':>20}"
        med = f"{self.method:<14}{self.median_spot:>20.3f}{self.median_core:>20.3f}"
        spread = f"{'':<14}{'+-%.3f' % self.iqr_spot:>20}{'+-%.3f' % self.iqr_core:>20}"
        note = f"median over {self.n_runs} runs of {self.n_folds}-fold CV, with interquartile range"
        return "\n".join([head, med, spread, note]) + "\n"


def cross_validate(method, dataset: Dataset, plan: FoldPlan, n_runs: int = 4, master_seed: int = 0,
                   seeds=None, keep_models: bool = False, audit_log: list | None = None) -> CvReport:
    """Train and evaluate ``method`` on every fold, ``n_runs`` times.

    ``method`` needs ``fit(train_dataset, seed, audit)`` returning an object
    with ``predict(spectra, stats)``.  Run seeds come from ``seeds`` or are derived
    from ``master_seed``.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    if seeds is not None and len(seeds) != n_runs:
        raise ValueError("need one seed per run")
    run_seeds = list(seeds) if seeds is not None else [derive_seed(master_seed, r) for r in range(n_runs)]
    data = dataset.normalize()
    folds, models, run_spot, run_core = [], [], [], []
    for r, run_seed in enumerate(run_seeds):
        run_results, run_models = [], []
        pooled = np.full(len(data), -1, dtype=np.int64)
        for f in range(len(plan)):
            train_idx, _ = plan.split(data.meta, f)
            audit = LeakageAudit()
            fitted = method.fit(data.subset(train_idx), derive_seed(run_seed, f), audit)
            res = evaluate_fold(fitted, data, plan, f, audit)
            if audit_log is not None:
                audit_log.append((r, f, audit))
            pooled[res.test_index] = res.spot_pred
            run_results.append(res)
            run_models.append(fitted if keep_models else None)
            logger.info("%s run %d fold %d: spot %.4f core %.4f", getattr(method, "name", "method"), r, f,
                        res.spot_bal_acc, res.core_bal_acc)
        tested = pooled >= 0
        test_set = data.subset(np.flatnonzero(tested))
        spot, core, _, _ = evaluate_predictions(test_set, pooled[tested])
        run_spot.append(balanced_accuracy(spot))
        run_core.append(balanced_accuracy(core))
        folds.append(run_results)
        models.append(run_models)
    return CvReport(getattr(method, "name", "method"), len(plan), n_runs, folds, run_spot, run_core,
                    models if keep_models else None)
