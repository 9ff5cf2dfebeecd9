"""Spectra datasets: container types, directory format, TIC normalization, folds.

A dataset directory holds three files:

``mz_axis.f64``
    little-endian float64 m/z positions, length ``d``
``spectra.f32``
    little-endian float32 intensities, row-major ``N x d``
``meta.jsonl``
    a header record ``{"class_names": [...], "d": d, "N": N}`` followed by one
    record per spectrum with ``spectrum_id``, ``patient_id``, ``core_id``,
    ``tma_id``, ``roi`` and ``label`` (a class name from the header)
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

AXIS_FILE = "mz_axis.f64"
SPECTRA_FILE = "spectra.f32"
META_FILE = "meta.jsonl"


class DatasetError(ValueError):
    """Malformed or inconsistent dataset content."""


class FoldError(ValueError):
    """The cohort cannot be split into the requested folds."""


@dataclass
class CohortMeta:
    """Per-spectrum labels and the TMA -> core -> spot hierarchy."""

    spectrum_id: np.ndarray
    patient_id: np.ndarray
    core_id: np.ndarray
    tma_id: np.ndarray
    roi: np.ndarray
    label: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.spectrum_id = np.asarray(self.spectrum_id, dtype=np.int64)
        self.patient_id = np.asarray(self.patient_id, dtype=str)
        self.core_id = np.asarray(self.core_id, dtype=str)
        self.tma_id = np.asarray(self.tma_id, dtype=str)
        self.roi = np.asarray(self.roi, dtype=bool)
        self.label = np.asarray(self.label, dtype=np.int64)
        self.class_names = list(self.class_names)

    def __len__(self):
        return len(self.spectrum_id)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> "CohortMeta":
        return CohortMeta(
            self.spectrum_id[index], self.patient_id[index], self.core_id[index],
            self.tma_id[index], self.roi[index], self.label[index], self.class_names,
        )

    def validate(self):
        n = len(self)
        for name in ("patient_id", "core_id", "tma_id", "roi", "label"):
            if len(getattr(self, name)) != n:
                raise DatasetError(f"meta field {name} has {len(getattr(self, name))} rows, expected {n}")
        if len(np.unique(self.spectrum_id)) != n:
            raise DatasetError("spectrum_id values must be unique")
        if n and (self.label.min() < 0 or self.label.max() >= self.n_classes):
            raise DatasetError(f"label index outside 0..{self.n_classes - 1}")
        core_tma: dict[str, str] = {}
        core_label: dict[str, int] = {}
        for core, tma, lab in zip(self.core_id, self.tma_id, self.label):
            if core_tma.setdefault(core, tma) != tma:
                raise DatasetError(f"core {core} appears on more than one TMA")
            if core_label.setdefault(core, int(lab)) != lab:
                raise DatasetError(f"core {core} carries more than one label")

    def tma_classes(self) -> dict[str, frozenset]:
        out: dict[str, set] = {}
        for tma, lab in zip(self.tma_id, self.label):
            out.setdefault(str(tma), set()).add(int(lab))
        return {k: frozenset(v) for k, v in sorted(out.items())}


@dataclass
class Dataset:
    """Spectra on a shared m/z grid plus their cohort metadata."""

    mz_axis: np.ndarray
    spectra: np.ndarray
    meta: CohortMeta
    normalized: bool = False

    def __post_init__(self):
        self.mz_axis = np.asarray(self.mz_axis, dtype=np.float64)
        self.spectra = np.asarray(self.spectra, dtype=np.float32)
        if self.spectra.ndim == 1 and self.spectra.size == 0:
            self.spectra = self.spectra.reshape(0, len(self.mz_axis))

    def __len__(self):
        return self.spectra.shape[0]

    @property
    def d(self) -> int:
        return self.spectra.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return self.meta.label

    @property
    def ids(self) -> np.ndarray:
        return self.meta.spectrum_id

    def subset(self, index) -> "Dataset":
        return Dataset(self.mz_axis, self.spectra[index], self.meta.subset(index), self.normalized)

    def roi_only(self) -> "Dataset":
        return self.subset(np.flatnonzero(self.meta.roi))

    def normalize(self) -> "Dataset":
        if self.normalized:
            return self
        return Dataset(self.mz_axis, tic_normalize(self.spectra, self.ids), self.meta, True)

    def validate(self):
        validate_axis(self.mz_axis)
        if self.spectra.ndim != 2:
            raise DatasetError("spectra must be a 2D matrix")
        if self.spectra.shape[1] != len(self.mz_axis):
            raise DatasetError(
                f"dimension mismatch: m/z axis has {len(self.mz_axis)} bins, spectra have {self.spectra.shape[1]}"
            )
        if len(self.meta) != self.spectra.shape[0]:
            raise DatasetError(f"meta has {len(self.meta)} rows, spectra matrix has {self.spectra.shape[0]}")
        if not np.all(np.isfinite(self.spectra)):
            bad = np.flatnonzero(~np.all(np.isfinite(self.spectra), axis=1))
            raise DatasetError(f"non-finite intensities in spectrum_id {int(self.ids[bad[0]])}")
        self.meta.validate()
        if self.normalized and len(self):
            sums = self.spectra.sum(axis=1, dtype=np.float64)
            if np.max(np.abs(sums - 1.0)) > 1e-5:
                raise DatasetError("dataset flagged as normalized but rows do not sum to 1")
        return self


def validate_axis(axis: np.ndarray):
    axis = np.asarray(axis)
    if axis.ndim != 1:
        raise DatasetError("m/z axis must be one-dimensional")
    if axis.size > 1 and not np.all(np.diff(axis) > 0):
        raise DatasetError("m/z axis must be strictly increasing")


def tic_normalize(spectra: np.ndarray, spectrum_ids=None) -> np.ndarray:
    """Scale every row to unit total ion count; returns float32."""
    x = np.asarray(spectra, dtype=np.float64)
    if x.ndim == 1:
        return tic_normalize(x[None, :], spectrum_ids)[0]
    sums = x.sum(axis=1)
    bad = np.flatnonzero(~(sums > 0))
    if bad.size:
        which = bad[0] if spectrum_ids is None else int(np.asarray(spectrum_ids)[bad[0]])
        raise DatasetError(f"spectrum {which} has non-positive total ion count {sums[bad[0]]}")
    return (x / sums[:, None]).astype(np.float32)


def one_hot(label, n_classes: int) -> np.ndarray:
    """Unit-vector encoding; accepts a scalar or an array of labels."""
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= n_classes):
        raise ValueError(f"label outside 0..{n_classes - 1}")
    return np.eye(n_classes)[label]


# --- directory format ------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = dataset.meta
    dataset.mz_axis.astype("<f8").tofile(path / AXIS_FILE)
    np.ascontiguousarray(dataset.spectra, dtype="<f4").tofile(path / SPECTRA_FILE)
    header = {"class_names": meta.class_names, "d": int(len(dataset.mz_axis)), "N": int(len(dataset))}
    if dataset.normalized:
        header["normalized"] = True
    with open(path / META_FILE, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(len(meta)):
            rec = {
                "spectrum_id": int(meta.spectrum_id[i]),
                "patient_id": str(meta.patient_id[i]),
                "core_id": str(meta.core_id[i]),
                "tma_id": str(meta.tma_id[i]),
                "roi": bool(meta.roi[i]),
                "label": meta.class_names[int(meta.label[i])],
            }
            fh.write(json.dumps(rec) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    for name in (AXIS_FILE, SPECTRA_FILE, META_FILE):
        if not (path / name).is_file():
            raise FileNotFoundError(f"dataset file missing: {path / name}")
    axis = np.fromfile(path / AXIS_FILE, dtype="<f8")
    validate_axis(axis)
    with open(path / META_FILE, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise DatasetError("meta.jsonl is empty; a header record is required")
    header = json.loads(lines[0])
    class_names = list(header["class_names"])
    d = int(header["d"])
    n = int(header["N"])
    if d != len(axis):
        raise DatasetError(f"dimension mismatch: header d={d}, m/z axis has {len(axis)} bins")
    records = [json.loads(ln) for ln in lines[1:]]
    if len(records) != n:
        raise DatasetError(f"header declares N={n} but meta.jsonl has {len(records)} records")
    lookup = {name: i for i, name in enumerate(class_names)}
    labels = []
    for rec in records:
        if rec["label"] not in lookup:
            raise DatasetError(f"unknown label {rec['label']!r} for spectrum {rec['spectrum_id']}")
        labels.append(lookup[rec["label"]])
    raw = np.fromfile(path / SPECTRA_FILE, dtype="<f4")
    if raw.size != n * d:
        raise DatasetError(f"dimension mismatch: spectra file holds {raw.size} values, expected {n}x{d}")
    meta = CohortMeta(
        [r["spectrum_id"] for r in records],
        [r["patient_id"] for r in records],
        [r["core_id"] for r in records],
        [r["tma_id"] for r in records],
        [r["roi"] for r in records],
        labels,
        class_names,
    )
    ds = Dataset(axis, raw.reshape(n, d).astype(np.float32), meta, bool(header.get("normalized", False)))
    return ds.validate()


# --- TMA-level folds -------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    train_tmas: tuple[str, ...]
    test_tmas: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]
    seed: int

    def __len__(self):
        return len(self.folds)

    def split(self, meta: CohortMeta, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Spectrum row indices ``(train, test)`` for fold ``i``."""
        fold = self.folds[i]
        test = np.isin(meta.tma_id, fold.test_tmas)
        train = np.isin(meta.tma_id, fold.train_tmas)
        if np.any(test & train):
            raise FoldError("a spectrum falls into both train and test")
        train_idx, test_idx = np.flatnonzero(train), np.flatnonzero(test)
        shared = np.intersect1d(meta.spectrum_id[train_idx], meta.spectrum_id[test_idx])
        if shared.size:
            raise FoldError(f"spectrum id {int(shared[0])} is in both train and test")
        return train_idx, test_idx

    def to_dict(self) -> dict:
        return {"seed": self.seed, "folds": [{"train": list(f.train_tmas), "test": list(f.test_tmas)} for f in self.folds]}


def make_fold_plan(meta: CohortMeta, n_folds: int = 4, seed: int = 0, max_tries: int = 200) -> FoldPlan:
    """Random TMA-level partition into ``n_folds`` test groups.

    TMAs are grouped by the set of classes they contain and each group is dealt
    round-robin over the folds, so every test fold sees every class whenever
    each class spans at least ``n_folds`` TMAs.
    """
    tma_cls = meta.tma_classes()
    tmas = list(tma_cls)
    if len(tmas) < n_folds:
        raise FoldError(f"{len(tmas)} TMAs cannot fill {n_folds} folds")
    names = meta.class_names or [str(c) for c in range(int(meta.label.max()) + 1)]
    for c, name in enumerate(names):
        count = sum(c in s for s in tma_cls.values())
        if count < n_folds:
            raise FoldError(f"class {name!r} appears on {count} TMAs; {n_folds} are needed to stratify")

    rng = np.random.default_rng(seed)
    groups: dict[frozenset, list[str]] = {}
    for tma in tmas:
        groups.setdefault(tma_cls[tma], []).append(tma)
    keys = sorted(groups, key=lambda s: (len(s), sorted(s)))
    for _ in range(max_tries):
        buckets: list[list[str]] = [[] for _ in range(n_folds)]
        slot = int(rng.integers(n_folds))
        for key in [keys[i] for i in rng.permutation(len(keys))]:
            members = groups[key]
            for j in rng.permutation(len(members)):
                buckets[slot % n_folds].append(members[j])
                slot += 1
        if all(set().union(*(tma_cls[t] for t in b)) >= set(range(len(names))) for b in buckets):
            folds = []
            for b in buckets:
                test = tuple(sorted(b))
                train = tuple(t for t in tmas if t not in b)
                folds.append(Fold(train, test))
            return FoldPlan(tuple(folds), seed)
    raise FoldError(f"no stratified {n_folds}-fold assignment found after {max_tries} shuffles")
