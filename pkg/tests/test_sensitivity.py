import numpy as np
import pytest
from conftest import numeric_grad

from isotopenet import model as M
from isotopenet import sensitivity as S


def mini(seed=0):
    return M.build_isotopenet(60, 2, seed)


def batch(n=5, d=60, seed=0):
    return np.random.default_rng(seed).random((n, d)) + 0.1


class TestSigma:
    def test_examples(self):
        np.testing.assert_array_equal(S.compute_sigma([[0.0, 3.0], [2.0, 3.0]]), [1.0, 0.0])

    def test_population_convention(self):
        X = batch(7, 4)
        np.testing.assert_allclose(S.compute_sigma(X), np.sqrt(((X - X.mean(0)) ** 2).mean(0)), atol=1e-15)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            S.compute_sigma(np.ones((1, 3)))


class TestSampleSensitivity:
    def test_matches_finite_differences(self):
        spec, state = mini(1)
        x = batch(1, seed=2)[0]
        sigma = np.random.default_rng(3).random(60)
        for j in (0, 1):
            f = lambda v: M.predict_proba(spec, state, v[None])[0, j]
            np.testing.assert_allclose(S.sample_sensitivity(spec, state, x, j, sigma),
                                       sigma * numeric_grad(f, x), atol=1e-8, rtol=1e-5)

    def test_zero_sigma_bins_are_zero(self):
        spec, state = mini(2)
        sigma = np.ones(60)
        sigma[[0, 17, 59]] = 0.0
        s = S.sample_sensitivity(spec, state, batch(3), 0, sigma)
        assert np.all(s[:, [0, 17, 59]] == 0.0)

    def test_two_class_antisymmetry(self):
        spec, state = mini(3)
        X = batch(8, seed=4)
        m0 = S.mean_sensitivity(spec, state, X, 0)
        m1 = S.mean_sensitivity(spec, state, X, 1)
        np.testing.assert_allclose(m0.values, -m1.values, atol=1e-6)

    def test_dense_closed_form(self):
        spec, state = M.build_residualnet(12, 2, 4, schedule=())
        P = M.compile_network(spec).views(state.theta.astype(np.float64))
        W = P["L0.w"]
        x = batch(1, 12, seed=5)[0]
        sigma = np.linspace(0.5, 2.0, 12)
        f = M.predict_proba(spec, state, x[None])[0]
        expect = sigma * f[0] * f[1] * (W[0] - W[1])
        np.testing.assert_allclose(S.sample_sensitivity(spec, state, x, 0, sigma), expect, atol=1e-12)

    def test_batch_equals_rows(self):
        spec, state = mini(5)
        X, sigma = batch(4, seed=6), np.ones(60)
        rows = np.stack([S.sample_sensitivity(spec, state, x, 1, sigma) for x in X])
        np.testing.assert_allclose(S.sample_sensitivity(spec, state, X, 1, sigma), rows, atol=1e-12)

    def test_bad_inputs(self):
        spec, state = mini()
        with pytest.raises(ValueError):
            S.sample_sensitivity(spec, state, batch(1)[0], 2, np.ones(60))
        with pytest.raises(ValueError):
            S.sample_sensitivity(spec, state, batch(1)[0], 0, np.ones(59))


class TestMeanSensitivity:
    def test_identical_spectra_give_zero_map(self):
        spec, state = mini(6)
        X = np.tile(batch(1)[0], (6, 1))
        smap = S.mean_sensitivity(spec, state, X, 0)
        assert np.all(smap.values == 0.0) and smap.n_samples == 6

    def test_mean_of_samples_and_batching(self):
        spec, state = mini(7)
        X = batch(9, seed=8)
        sigma = S.compute_sigma(X)
        expect = S.sample_sensitivity(spec, state, X, 0, sigma).mean(axis=0)
        np.testing.assert_allclose(S.mean_sensitivity(spec, state, X, 0, batch_size=4).values, expect, atol=1e-14)

    def test_top_ties_to_lower_bin(self):
        smap = S.SensitivityMap(0, np.array([0.1, -0.5, 0.5, 0.2]), np.ones(4), 1)
        assert smap.top(3).tolist() == [1, 2, 3]


class TestExport:
    def test_round_trip_and_peaks(self, tmp_path):
        values = np.random.default_rng(9).normal(size=40)
        smap = S.SensitivityMap(1, values, np.ones(40), 10)
        axis = 900 + np.arange(40) * 0.37
        path, peaks = S.export_map(smap, axis, tmp_path / "out" / "map.tsv", n_peaks=7)
        mz, back = S.read_map(path)
        np.testing.assert_array_equal(mz, axis)
        np.testing.assert_array_equal(back, values)
        rows = [line.split("\t") for line in peaks.read_text().splitlines()[1:]]
        assert len(rows) == 7
        mags = [abs(float(r[3])) for r in rows]
        assert mags == sorted(mags, reverse=True)
        assert all((r[4] == "+") == (float(r[3]) >= 0) for r in rows)
        assert [int(r[1]) for r in rows] == smap.top(7).tolist()

    def test_axis_mismatch(self, tmp_path):
        with pytest.raises(ValueError):
            S.export_map(S.SensitivityMap(0, np.zeros(4), np.ones(4), 1), np.arange(5.0), tmp_path / "m.tsv")

    def test_band_ratio(self):
        smap = S.SensitivityMap(0, np.array([4.0, -4.0, 1.0, -1.0, 1.0]), np.ones(5), 1)
        assert S.band_ratio(smap, [0, 1], [2, 3, 4]) == 4.0
