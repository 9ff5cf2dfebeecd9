"""Input-gradient sensitivity maps scaled by per-bin standard deviation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as M


@dataclass
class SensitivityMap:
    class_index: int
    values: np.ndarray  # signed mean scaled gradient per bin
    sigma: np.ndarray
    n_samples: int

    def top(self, n: int = 10) -> np.ndarray:
        """Bins with the largest ``|value|``, ties to the lower bin."""
        return np.argsort(-np.abs(self.values), kind="stable")[:n]


def compute_sigma(train_spectra) -> np.ndarray:
    """Population (divide-by-N) standard deviation of every bin."""
    X = np.asarray(train_spectra, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two spectra to estimate per-bin spread")
    sd = X.std(axis=0)
    sd[np.ptp(X, axis=0) == 0] = 0.0  # constant bins exactly, not mean-rounding residue
    return sd


def sample_sensitivity(spec: M.NetworkSpec, state: M.NetworkState, x, j: int, sigma) -> np.ndarray:
    """``sigma * d f_j / d x`` for one spectrum or a batch of spectra.

    Positive entries mean that raising the bin raises the class-``j`` probability.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (spec.input_dim,):
        raise ValueError(f"sigma has length {sigma.size}, network expects {spec.input_dim}")
    return sigma * M.backward_input(spec, state, x, j)


def mean_sensitivity(spec: M.NetworkSpec, state: M.NetworkState, train_spectra, j: int = 0,
                     sigma=None, batch_size: int = 512) -> SensitivityMap:
    X = np.asarray(train_spectra)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("mean sensitivity needs a non-empty set of spectra")
    if sigma is None:
        sigma = compute_sigma(X)
    total = np.zeros(spec.input_dim)
    for start in range(0, X.shape[0], batch_size):
        total += sample_sensitivity(spec, state, X[start:start + batch_size], j, sigma).sum(axis=0)
    return SensitivityMap(j, total / X.shape[0], np.asarray(sigma, dtype=np.float64), X.shape[0])


def peak_table(smap: SensitivityMap, mz_axis, n: int = 20) -> list[tuple[int, float, float]]:
    """``(bin, m/z, value)`` rows for the ``n`` largest ``|value|``."""
    mz_axis = np.asarray(mz_axis)
    return [(int(b), float(mz_axis[b]), float(smap.values[b])) for b in smap.top(n)]


def export_map(smap: SensitivityMap, mz_axis, path, n_peaks: int = 20) -> tuple[Path, Path]:
    """Write ``<path>`` (m/z and value columns) and ``<stem>.peaks.tsv``.

    The map file is whitespace-separated with ``#`` comments, readable by gnuplot.
    """
    mz_axis = np.asarray(mz_axis, dtype=np.float64)
    if mz_axis.shape != smap.values.shape:
        raise ValueError("m/z axis and sensitivity map differ in length")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"# class {smap.class_index}, n_samples {smap.n_samples}\n")
        fh.write("# mz\tsensitivity\n")
        for mz, v in zip(mz_axis, smap.values):
            fh.write(f"{float(mz)!r}\t{float(v)!r}\n")
    peaks = path.with_suffix(".peaks.tsv")
    with open(peaks, "w") as fh:
        fh.write("rank\tbin\tmz\tsensitivity\tsign\n")
        for rank, (b, mz, v) in enumerate(peak_table(smap, mz_axis, n_peaks), 1):
            fh.write(f"{rank}\t{b}\t{float(mz)!r}\t{float(v)!r}\t{'+' if v >= 0 else '-'}\n")
    return path, peaks


def read_map(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, comments="#", ndmin=2)
    return data[:, 0], data[:, 1]


def band_ratio(smap: SensitivityMap, band, background) -> float:
    """Mean ``|value|`` over ``band`` divided by the mean over ``background``."""
    v = np.abs(smap.values)
    return float(v[np.asarray(band)].mean() / v[np.asarray(background)].mean())
