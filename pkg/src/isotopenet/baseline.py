"""ROC/LDA reference pipeline.

Bins are ranked by the Mann-Whitney-Wilcoxon statistic in its
probability-of-superiority form; the top ``K`` bins feed a shrinkage LDA.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

K_GRID = (5, 10, 20, 50, 100)


def mww_statistic(values_a, values_b) -> float:
    """``P(b > a) + P(b == a) / 2`` over all cross-group pairs."""
    a = np.asarray(values_a, dtype=np.float64).ravel()
    b = np.asarray(values_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be non-empty")
    ranks = rankdata(np.concatenate([a, b]))
    u_b = ranks[a.size:].sum() - b.size * (b.size + 1) / 2.0
    return float(u_b / (a.size * b.size))


def mww_columns(values_a: np.ndarray, values_b: np.ndarray) -> np.ndarray:
    """Column-wise :func:`mww_statistic` for two ``(n, d)`` matrices."""
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("both groups must be non-empty")
    ranks = rankdata(np.concatenate([a, b]), axis=0)
    nb = b.shape[0]
    u_b = ranks[a.shape[0]:].sum(axis=0) - nb * (nb + 1) / 2.0
    return u_b / (a.shape[0] * nb)


@dataclass
class RocRanking:
    statistic: np.ndarray  # per bin, in [0, 1]
    score: np.ndarray  # |statistic - 0.5|
    order: np.ndarray  # bins by descending score, ties to the lower bin

    def top(self, k: int) -> np.ndarray:
        return select_top_k(self, k)


def rank_bins(spectra, labels) -> RocRanking:
    """Rank every bin by two-sided discriminability between classes 0 and 1.

    ``labels`` is a label array or a :class:`~isotopenet.data.CohortMeta`.
    """
    spectra = np.asarray(spectra)
    labels = np.asarray(getattr(labels, "label", labels))
    present = np.unique(labels)
    if present.size != 2:
        raise ValueError(f"ROC ranking needs exactly two classes, found {present.tolist()}")
    a = spectra[labels == present[0]]
    b = spectra[labels == present[1]]
    stat = mww_columns(a, b)
    score = np.abs(stat - 0.5)
    order = np.argsort(-score, kind="stable")
    return RocRanking(stat, score, order)


def select_top_k(ranking: RocRanking, k: int) -> np.ndarray:
    d = ranking.order.size
    if not 1 <= k <= d:
        raise ValueError(f"K={k} outside 1..{d}")
    return ranking.order[:k].copy()


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


@dataclass
class LdaModel:
    means: np.ndarray  # (C, K)
    covariance: np.ndarray  # regularized pooled covariance (K, K)
    priors: np.ndarray
    classes: np.ndarray
    shrinkage: float
    features: np.ndarray | None = None  # selected bins, when fitted through the pipeline

    def coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        """Linear discriminant weights ``(C, K)`` and offsets ``(C,)``."""
        chol = linalg.cho_factor(self.covariance)
        w = linalg.cho_solve(chol, self.means.T).T
        b = -0.5 * np.sum(w * self.means, axis=1) + np.log(self.priors)
        return w, b

    @property
    def direction(self) -> np.ndarray:
        """``Sigma^-1 (mu_0 - mu_1)`` for two-class models."""
        w, _ = self.coefficients()
        return w[0] - w[1]


def lda_fit(features, labels, shrinkage: float = 0.1) -> LdaModel:
    """Class means, pooled within-class covariance shrunk as ``(1-g) S + g diag(S)``."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim == 1:
        X = X[:, None]
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError("shrinkage must lie in [0, 1]")
    classes, counts = np.unique(y, return_counts=True)
    means = np.stack([X[y == c].mean(axis=0) for c in classes])
    centered = X - means[np.searchsorted(classes, y)]
    dof = max(X.shape[0] - classes.size, 1)
    pooled = centered.T @ centered / dof
    cov = (1.0 - shrinkage) * pooled + shrinkage * np.diag(np.diag(pooled))
    if shrinkage > 0:
        diag = np.diag(cov).copy()
        flat = diag <= 0
        if np.any(flat):
            positive = diag[~flat]
            floor = 1e-6 * positive.mean() if positive.size else 1e-12 * max(float(np.mean(X * X)), 1e-300)
            cov[np.diag_indices_from(cov)] = np.where(flat, floor, diag)
    msg = "pooled covariance is singular; use a shrinkage coefficient > 0 or fewer features"
    try:
        factor, _ = linalg.cho_factor(cov, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularCovarianceError(msg) from exc
    # rounding can leave a tiny positive pivot on an exactly singular matrix
    pivots = np.diag(factor) ** 2
    if pivots.min() <= cov.shape[0] * np.finfo(float).eps * max(np.diag(cov).max(), 1e-300):
        raise SingularCovarianceError(msg)
    return LdaModel(means, cov, counts / counts.sum(), classes, shrinkage)


def lda_scores(model: LdaModel, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    w, b = model.coefficients()
    return X @ w.T + b


def lda_predict(model: LdaModel, features) -> np.ndarray:
    """Class with the largest discriminant score; ties to the lowest class."""
    return model.classes[np.argmax(lda_scores(model, features), axis=1)]


@dataclass
class RocLdaClassifier:
    ranking: RocRanking
    model: LdaModel

    def predict(self, spectra, stats=None) -> np.ndarray:
        return lda_predict(self.model, np.asarray(spectra)[:, self.model.features])


def fit_roc_lda(spectra, labels, k: int, shrinkage: float = 0.1, ranking: RocRanking | None = None):
    if ranking is None:
        ranking = rank_bins(spectra, labels)
    bins = select_top_k(ranking, k)
    model = lda_fit(np.asarray(spectra)[:, bins], labels, shrinkage)
    model.features = bins
    return RocLdaClassifier(ranking, model)


# --- cross-validated pipeline ----------------------------------------------


@dataclass
class RocLdaMethod:
    """Fold-level fitter usable with :func:`isotopenet.evaluation.cross_validate`."""

    k: int = 20
    shrinkage: float = 0.1
    name: str = "ROC/LDA"

    def fit(self, train_set, seed: int = 0, audit=None) -> RocLdaClassifier:
        if audit is not None:
            audit.record("ranking", train_set.ids)
            audit.record("lda", train_set.ids)
        return fit_roc_lda(train_set.spectra, train_set.labels, self.k, self.shrinkage)


@dataclass
class BaselineReport:
    k_grid: tuple
    rows: list  # dicts with fold, k, level, balanced_accuracy
    pooled: dict  # (k, level) -> balanced accuracy of pooled test predictions

    def per_k(self, level: str = "spot") -> dict:
        return {k: self.pooled[(k, level)] for k in self.k_grid}

    def worst(self, level: str = "spot") -> tuple[int, float]:
        vals = self.per_k(level)
        k = min(vals, key=lambda key: (vals[key], key))
        return k, vals[k]

    def best(self, level: str = "spot") -> tuple[int, float]:
        vals = self.per_k(level)
        k = max(vals, key=lambda key: (vals[key], -key))
        return k, vals[k]

    def to_table(self, delimiter: str = "\t") -> str:
        lines = [delimiter.join(["fold", "k", "level", "balanced_accuracy"])]
        for r in self.rows:
            lines.append(delimiter.join([str(r["fold"]), str(r["k"]), r["level"], repr(float(r["balanced_accuracy"]))]))
        for (k, level), v in sorted(self.pooled.items()):
            lines.append(delimiter.join(["pooled", str(k), level, repr(float(v))]))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        head = f"{'Method':<18}{'Bal. Accur. (Spot)':>20}{'Bal. Accur. (Core)':>20}"
        out = [head]
        for tag, pick in (("worst", self.worst), ("best", self.best)):
            ks, vs = pick("spot")
            kc, vc = pick("core")
            out.append(f"{'ROC/LDA (' + tag + ')':<18}{f'{vs:.3f} (K={ks})':>20}{f'{vc:.3f} (K={kc})':>20}")
        return "\n".join(out) + "\n"


def roc_lda_pipeline(dataset, plan, k_grid=K_GRID, shrinkage: float = 0.1, audit_log: list | None = None) -> BaselineReport:
    """Evaluate ROC ranking plus LDA for every ``K`` on every fold of ``plan``.

    Bins are ranked once per fold on the training TMAs; each ``K`` reuses
    that ranking.
    """
    from .evaluation import LeakageAudit, evaluate_fold, evaluate_predictions
    from .metrics import balanced_accuracy

    k_grid = tuple(int(k) for k in k_grid)
    data = dataset.normalize()
    bad = [k for k in k_grid if not 1 <= k <= data.d]
    if bad:
        raise ValueError(f"K={bad[0]} outside 1..{data.d}")
    rows = []
    pooled = {k: np.full(len(data), -1, dtype=np.int64) for k in k_grid}
    for f in range(len(plan)):
        train_idx, _ = plan.split(data.meta, f)
        train_set = data.subset(train_idx)
        audit = LeakageAudit()
        audit.record("ranking", train_set.ids)
        ranking = rank_bins(train_set.spectra, train_set.labels)
        for k in k_grid:
            audit.record("lda", train_set.ids)
            clf = fit_roc_lda(train_set.spectra, train_set.labels, k, shrinkage, ranking)
            res = evaluate_fold(clf, data, plan, f, audit)
            pooled[k][res.test_index] = res.spot_pred
            rows.append({"fold": f, "k": k, "level": "spot", "balanced_accuracy": res.spot_bal_acc})
            rows.append({"fold": f, "k": k, "level": "core", "balanced_accuracy": res.core_bal_acc})
        if audit_log is not None:
            audit_log.append((f, audit))
    summary = {}
    for k, pred in pooled.items():
        tested = pred >= 0
        spot, core, _, _ = evaluate_predictions(data.subset(np.flatnonzero(tested)), pred[tested])
        summary[(k, "spot")] = balanced_accuracy(spot)
        summary[(k, "core")] = balanced_accuracy(core)
        logger.info("ROC/LDA K=%d: spot %.4f core %.4f", k, summary[(k, "spot")], summary[(k, "core")])
    return BaselineReport(k_grid, rows, summary)
