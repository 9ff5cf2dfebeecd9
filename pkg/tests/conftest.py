import numpy as np
import pytest

from isotopenet import model as M
from isotopenet import synth
from isotopenet.data import CohortMeta, Dataset


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar ``f`` at every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300))


def zero_branches(spec, state, layers):
    net = M.compile_network(spec)
    theta = state.theta.astype(np.float64).copy()
    for s in net.params:
        layer = int(s.name.split(".")[0][1:])
        part = s.name.split(".")[1]
        if layer in layers and (part.startswith("conv") or part.startswith("bn")):
            theta[s.offset:s.offset + s.size] = 0.0
    return M.NetworkState(theta, state.stats.copy())


def spot_level_null(data: Dataset, seed: int) -> Dataset:
    """Labels permuted across spots; each spot becomes its own core so meta stays valid."""
    m = data.meta
    labels = np.random.default_rng(seed).permutation(m.label)
    cores = np.array([f"S{i}" for i in m.spectrum_id])
    meta = CohortMeta(m.spectrum_id, m.patient_id, cores, m.tma_id, m.roi, labels, m.class_names)
    meta.validate()
    return Dataset(data.mz_axis, data.spectra, meta, data.normalized)


@pytest.fixture(scope="session")
def small_cohort():
    """Cheap ADSQ-like cohort: 8 TMAs x 4 cores x 8 spots at d=150."""
    data, truth = synth.synth_cohort(synth.adsq_preset(150, seed=11), 8, 4, 8)
    return data.normalize(), truth


# acceptance verdicts, echoed in the terminal summary so they show without -s
ACCEPTANCE: list[str] = []


def record_criterion(title: str, ok: bool | None, detail: str) -> bool | None:
    """``ok=None`` marks a criterion that could not run here."""
    verdict = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"{verdict}  {title} ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
