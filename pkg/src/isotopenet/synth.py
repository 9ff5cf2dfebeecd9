"""Synthetic spectra cohorts with planted isotope-envelope markers.

Each spot spectrum is::

    scale * (baseline + class markers + TMA confounder) + |noise|

Markers are isotope envelopes: ``n_peaks`` Gaussian peaks spaced 1 Da apart on
the m/z axis with geometrically decaying heights.  A confounder is a smooth
broadband plateau added to every spot of the TMAs it is attached to.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import CohortMeta, Dataset


@dataclass
class Marker:
    center: int  # bin of the monoisotopic peak
    n_peaks: int = 4
    amplitude: float = 1.0
    sign: int = 1


@dataclass
class Confounder:
    start: int
    stop: int  # exclusive
    amplitude: float
    tma_classes: tuple[int, ...] = (1,)  # applied to TMAs whose majority class is listed
    tma_jitter: float = 0.3
    ripple_period: float = 0.0  # > 0: oscillating band with near-zero net intensity


@dataclass
class SynthSpec:
    d: int = 150
    class_names: tuple[str, ...] = ("A", "B")
    markers: list[list[Marker]] = field(default_factory=list)
    confounders: list[Confounder] = field(default_factory=list)
    noise_sigma: float = 0.2
    baseline_amp: float = 1.0
    peak_width_bins: float = 1.0
    seed: int = 0
    mz_start: float = 1000.0
    mz_step: float = 0.25  # Da per bin
    envelope_decay: float = 0.6
    amplitude_jitter: float = 0.3  # log-normal sigma of per-spot marker height
    scale_jitter: float = 0.2  # log-normal sigma of per-spot total intensity
    layout: str = "mixed"  # "mixed": both classes on every TMA, "pure": one class per TMA
    cores_per_patient: int = 2
    roi_fraction: float = 1.0

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def axis(self) -> np.ndarray:
        return self.mz_start + self.mz_step * np.arange(self.d, dtype=np.float64)

    def validate(self):
        if self.d < 1:
            raise ValueError("d must be positive")
        if len(self.markers) not in (0, self.n_classes):
            raise ValueError("markers must be given per class")
        if self.layout not in ("mixed", "pure"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.noise_sigma < 0 or self.baseline_amp < 0:
            raise ValueError("noise_sigma and baseline_amp must be non-negative")
        for c, ms in enumerate(self.markers):
            for m in ms:
                if not 0 <= m.center < self.d:
                    raise ValueError(f"marker of class {c} centred at bin {m.center} lies outside [0, {self.d})")
                last = m.center + (m.n_peaks - 1) / self.mz_step
                if last > self.d - 1:
                    raise ValueError(f"isotope envelope at bin {m.center} runs past the axis end (bin {last:.1f})")
        for cf in self.confounders:
            if not 0 <= cf.start < cf.stop <= self.d:
                raise ValueError(f"confounder band [{cf.start}, {cf.stop}) outside the axis")
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["class_names"] = list(self.class_names)
        for cf in out["confounders"]:
            cf["tma_classes"] = list(cf["tma_classes"])
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthSpec":
        raw = dict(raw)
        raw["markers"] = [[Marker(**m) for m in ms] for ms in raw.get("markers", [])]
        raw["confounders"] = [
            Confounder(**{**c, "tma_classes": tuple(c.get("tma_classes", (1,)))}) for c in raw.get("confounders", [])
        ]
        if "class_names" in raw:
            raw["class_names"] = tuple(raw["class_names"])
        return cls(**raw)

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


@dataclass
class GroundTruth:
    marker_bins: dict[int, np.ndarray]  # class -> bins covered by its envelopes
    peak_bins: dict[int, np.ndarray]  # class -> nearest bin of every isotope peak
    confounder_bins: np.ndarray
    tma_confounded: dict[str, bool]

    def all_marker_bins(self) -> np.ndarray:
        parts = list(self.marker_bins.values())
        return np.unique(np.concatenate(parts)) if parts else np.array([], dtype=int)

    def to_dict(self) -> dict:
        return {
            "marker_bins": {str(k): v.tolist() for k, v in self.marker_bins.items()},
            "peak_bins": {str(k): v.tolist() for k, v in self.peak_bins.items()},
            "confounder_bins": self.confounder_bins.tolist(),
            "tma_confounded": self.tma_confounded,
        }


def peak_positions(spec: SynthSpec, marker: Marker) -> np.ndarray:
    """Fractional bin position of each isotope peak (1 Da spacing)."""
    axis = spec.axis()
    mz = axis[marker.center] + np.arange(marker.n_peaks, dtype=np.float64)
    return np.interp(mz, axis, np.arange(spec.d, dtype=np.float64))


def render_marker(spec: SynthSpec, marker: Marker) -> np.ndarray:
    bins = np.arange(spec.d, dtype=np.float64)
    out = np.zeros(spec.d)
    for i, pos in enumerate(peak_positions(spec, marker)):
        height = marker.amplitude * spec.envelope_decay ** i
        out += height * np.exp(-0.5 * ((bins - pos) / spec.peak_width_bins) ** 2)
    return marker.sign * out


def render_baseline(spec: SynthSpec) -> np.ndarray:
    bins = np.arange(spec.d, dtype=np.float64)
    return spec.baseline_amp * (0.5 + 0.5 * np.exp(-bins / (spec.d / 3.0)))


def render_confounder(spec: SynthSpec, cf: Confounder) -> np.ndarray:
    out = np.zeros(spec.d)
    width = cf.stop - cf.start
    ramp = np.sin(np.pi * (np.arange(width) + 0.5) / width) ** 0.5
    if cf.ripple_period > 0:
        ramp = ramp * np.sin(2 * np.pi * (np.arange(width) + 0.5) / cf.ripple_period)
    out[cf.start:cf.stop] = cf.amplitude * ramp
    return out


def _envelope_bins(spec: SynthSpec, marker: Marker) -> tuple[np.ndarray, np.ndarray]:
    reach = 2.0 * spec.peak_width_bins
    pos = peak_positions(spec, marker)
    covered = set()
    for p in pos:
        lo = max(0, int(np.ceil(p - reach)))
        hi = min(spec.d - 1, int(np.floor(p + reach)))
        covered.update(range(lo, hi + 1))
    return np.array(sorted(covered), dtype=int), np.rint(pos).astype(int)


def synth_cohort(spec: SynthSpec, n_tmas: int, cores_per_tma: int, spots_per_core: int):
    """Generate ``(dataset, ground_truth)``; deterministic in ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C = spec.n_classes
    axis = spec.axis()
    baseline = render_baseline(spec)
    templates = [[render_marker(spec, m) for m in ms] for ms in spec.markers] or [[] for _ in range(C)]
    conf_shapes = [render_confounder(spec, cf) for cf in spec.confounders]

    rows, spot_class, spot_tma = [], [], []
    ids, patients, cores, tmas, rois = [], [], [], [], []
    tma_confounded: dict[str, bool] = {}
    sid = 0
    for t in range(n_tmas):
        tma = f"TMA{t:02d}"
        if spec.layout == "pure":
            core_labels = [t % C] * cores_per_tma
        else:
            n_pat = -(-cores_per_tma // spec.cores_per_patient)
            offset = t % C
            core_labels = [(p + offset) % C for p in range(n_pat) for _ in range(spec.cores_per_patient)]
            core_labels = core_labels[:cores_per_tma]
        majority = int(np.bincount(core_labels, minlength=C).argmax())
        tma_bias = np.zeros(spec.d)
        hit = False
        for cf, shape in zip(spec.confounders, conf_shapes):
            if majority in cf.tma_classes:
                tma_bias += shape * max(0.0, 1.0 + cf.tma_jitter * rng.standard_normal())
                hit = True
        tma_confounded[tma] = hit
        for k, lab in enumerate(core_labels):
            core = f"{tma}-C{k:02d}"
            patient = f"{tma}-P{k // spec.cores_per_patient:02d}"
            for _ in range(spots_per_core):
                x = baseline + tma_bias
                for tpl in templates[lab]:
                    jitter = np.exp(spec.amplitude_jitter * rng.standard_normal()) if spec.amplitude_jitter else 1.0
                    x = x + jitter * tpl
                scale = np.exp(spec.scale_jitter * rng.standard_normal()) if spec.scale_jitter else 1.0
                x = scale * x
                if spec.noise_sigma:
                    x = x + np.abs(spec.noise_sigma * rng.standard_normal(spec.d))
                rows.append(np.maximum(x, 0.0))
                ids.append(sid)
                patients.append(patient)
                cores.append(core)
                tmas.append(tma)
                rois.append(bool(rng.random() < spec.roi_fraction))
                spot_class.append(lab)
                sid += 1

    spectra = np.array(rows, dtype=np.float32).reshape(len(rows), spec.d)
    meta = CohortMeta(ids, patients, cores, tmas, rois, spot_class, list(spec.class_names))
    marker_bins, peak_bins = {}, {}
    for c, ms in enumerate(spec.markers):
        env = [_envelope_bins(spec, m) for m in ms]
        marker_bins[c] = np.unique(np.concatenate([e[0] for e in env])) if env else np.array([], dtype=int)
        peak_bins[c] = np.unique(np.concatenate([e[1] for e in env])) if env else np.array([], dtype=int)
    conf_bins = sorted({b for cf in spec.confounders for b in range(cf.start, cf.stop)})
    truth = GroundTruth(marker_bins, peak_bins, np.array(conf_bins, dtype=int), tma_confounded)
    return Dataset(axis, spectra, meta, normalized=False), truth


# --- presets ---------------------------------------------------------------


def adsq_preset(d: int = 150, seed: int = 0, **overrides) -> SynthSpec:
    """Two tumour subtypes on shared TMAs, separated only by planted markers."""
    a = int(round(0.27 * d))
    b = int(round(0.60 * d))
    spec = SynthSpec(
        d=d,
        class_names=("AD", "SQ"),
        markers=[[Marker(a, 4, 3.0, 1)], [Marker(b, 4, 3.0, 1)]],
        noise_sigma=0.3,
        seed=seed,
        layout="mixed",
        roi_fraction=0.9,
    )
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec.validate()


def lp_preset(d: int = 150, seed: int = 0, **overrides) -> SynthSpec:
    """Two primary sites on separate TMAs, with an oscillating artifact band on class-1 TMAs."""
    a = int(round(0.15 * d))
    b = int(round(0.30 * d))
    lo, hi = int(round(0.62 * d)), int(round(0.90 * d))
    spec = SynthSpec(
        d=d,
        class_names=("Lung", "Pancreas"),
        markers=[[Marker(a, 3, 0.6, 1)], [Marker(b, 3, 0.6, 1)]],
        confounders=[Confounder(lo, hi, 0.4, (1,), 0.3, ripple_period=4.0)],
        noise_sigma=0.3,
        seed=seed,
        layout="pure",
        roi_fraction=1.0,
    )
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec.validate()
