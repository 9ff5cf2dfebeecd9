import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isotopenet import model as M
from isotopenet.training import TrainConfig, train
from conftest import numeric_grad, rel_err, zero_branches

logger = logging.getLogger(__name__)

PAPER_ISOTOPENET_PARAMS = 13_935
PAPER_RESIDUALNET_PARAMS = 2_132_130


def mini(seed=0, **flags):
    return M.build_isotopenet(150, 2, seed, **flags)


def positive_batch(n=4, d=150, seed=0):
    return np.random.default_rng(seed).random((n, d)) + 0.1


class TestArchitecture:
    def test_shape_pipeline_full_size(self):
        spec, _ = M.build_isotopenet(27286, 2, 0)
        net = M.compile_network(spec)
        assert net.shapes[:5] == [(1, 27286), (8, 27286), (8, 5458), (8, 5458), (1, 1820)]
        assert M.local_length(spec) == 1820

    def test_parameter_budget(self):
        spec, state = M.build_isotopenet(27286, 2, 0)
        total = state.total_params
        logger.info("IsotopeNet(27286, 2): %d parameters, reference %d", total, PAPER_ISOTOPENET_PARAMS)
        assert 12_000 <= total <= 16_000
        assert [c for _, c in M.compile_network(spec).param_counts()] == [288, 512, 432, 43, 0, 7280, 0, 3642]

    def test_parameter_count_is_analytic_sum(self):
        def residual(c_in, c_out, k, stride, depth=2):
            n = 0
            c = c_in
            for _ in range(depth):
                n += c_out * c * k + c_out + 2 * c_out  # kernels, bias, gamma/beta
                c = c_out
            if stride != 1 or c_in != c_out:
                n += c_out * c_in + 2 * c_out
            return n

        for d in (150, 1000, 27286):
            spec, state = M.build_isotopenet(d, 3, 0)
            length = -(-(-(-d // 5)) // 3)
            expect = (residual(1, 8, 3, 1) + residual(8, 8, 3, 5) + residual(8, 8, 3, 1) + residual(8, 1, 3, 3)
                      + 4 * length + 3 * length + 3)
            assert state.total_params == expect

    def test_residualnet_budget(self):
        spec = M.residualnet_spec(27286, 2)
        n = M.compile_network(spec).n_params
        logger.info("ResidualNet(27286, 2): %d parameters, reference %d", n, PAPER_RESIDUALNET_PARAMS)
        assert 1_500_000 <= n <= 3_000_000

    def test_mini_local_length(self):
        spec, _ = mini()
        assert M.local_length(spec) == 10

    def test_too_small_input(self):
        with pytest.raises(ValueError, match="too small"):
            M.build_isotopenet(15, 2)

    def test_bad_schedule(self):
        with pytest.raises(ValueError, match="schedule"):
            M.residualnet_spec(100, 2, ((8, 0),))

    def test_depth_zero_schedule_is_dense_softmax(self):
        spec, state = M.build_residualnet(20, 2, 1, schedule=())
        P = M.compile_network(spec).views(state.theta.astype(np.float64))
        x = positive_batch(3, 20)
        probs, _ = M.forward(spec, state, x)
        z = x @ P["L0.w"].T + P["L0.b"]
        expect = np.exp(z - z.max(axis=1, keepdims=True))
        np.testing.assert_allclose(probs, expect / expect.sum(axis=1, keepdims=True), atol=1e-14)

    def test_last_layer_must_be_softmax_dense(self):
        with pytest.raises(ValueError):
            M.NetworkSpec((M.Residual(),), 50, 2)
        with pytest.raises(ValueError):
            M.NetworkSpec((M.Dense(3),), 50, 2)

    def test_builders_deterministic(self):
        _, a = mini(5)
        _, b = mini(5)
        _, c = mini(6)
        np.testing.assert_array_equal(a.theta, b.theta)
        assert not np.array_equal(a.theta, c.theta)
        assert a.theta.dtype == np.float32

    def test_he_initialization_scale(self):
        spec, state = M.build_isotopenet(27286, 2, 0)
        P = M.compile_network(spec).views(state.theta)
        w = P["L5.w"]  # local windows, fan-in 3
        assert abs(w.var() - 2 / 3) < 0.05
        assert not P["L5.b"].any()

    def test_spec_dict_round_trip(self):
        spec, _ = mini()
        assert M.NetworkSpec.from_dict(spec.to_dict()) == spec


class TestForward:
    @pytest.mark.parametrize("mode", ["train", "infer"])
    def test_probability_rows(self, mode):
        spec, state = mini()
        probs, trace = M.forward(spec, state, positive_batch(6), mode, np.random.default_rng(0))
        assert np.all(np.abs(probs.sum(axis=1) - 1) < 1e-6)
        assert np.all((probs > 0) & (probs < 1))
        assert len(trace.caches) == len(spec.layers)

    def test_deterministic(self):
        spec, state = mini()
        x = positive_batch()
        a, _ = M.forward(spec, state, x)
        b, _ = M.forward(spec, state, x)
        np.testing.assert_array_equal(a, b)

    def test_length_mismatch(self):
        spec, state = mini()
        with pytest.raises(ValueError, match="does not match"):
            M.forward(spec, state, np.zeros((1, 149)))

    def test_nan_reports_layer(self):
        spec, state = mini()
        x = positive_batch(2)
        x[0, 3] = np.nan
        with pytest.raises(M.NumericalError, match="layer 0"):
            M.forward(spec, state, x)

    def test_residual_identity_non_projecting(self):
        spec = M.NetworkSpec((M.Residual(2, 3, 1, 1), M.Residual(2, 3, 1, 1), M.Dense(2)), 40, 2)
        state = zero_branches(spec, M.init_state(spec, 0), {0, 1})
        x = positive_batch(3, 40)
        net = M.compile_network(spec)
        P, S = net.views(state.theta), net.stat_views(state.stats)
        for mode in ("train", "infer"):
            h = x[:, None, :]
            for op in net.ops[:2]:
                out, _, _ = op.forward(P, S, h, mode, None)
                np.testing.assert_array_equal(out, h)
                h = out

    def test_residual_identity_any_sign_without_post_relu(self):
        spec = M.NetworkSpec((M.Residual(2, 3, 1, 1), M.Dense(2)), 40, 2, post_add_relu=False)
        state = zero_branches(spec, M.init_state(spec, 0), {0})
        net = M.compile_network(spec)
        x = np.random.default_rng(1).normal(size=(3, 1, 40))
        out, _, _ = net.ops[0].forward(net.views(state.theta), net.stat_views(state.stats), x, "infer", None)
        np.testing.assert_array_equal(out, x)

    def test_isotopenet_inner_layer_identity(self):
        spec, state = mini()
        state = zero_branches(spec, state, {2})
        net = M.compile_network(spec)
        h = np.random.default_rng(2).random((2, 8, 30))
        out, _, _ = net.ops[2].forward(net.views(state.theta.astype(np.float64)), net.stat_views(state.stats), h,
                                       "infer", None)
        np.testing.assert_array_equal(out, h)

    def test_projection_is_linear_with_zero_branches(self):
        spec, state = mini(post_add_relu=False)
        state = zero_branches(spec, state, {1})
        net = M.compile_network(spec)
        P, S = net.views(state.theta.astype(np.float64)), net.stat_views(state.stats)
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 1, 8, 30))
        f = lambda v: net.ops[1].forward(P, S, v, "infer", None)[0]
        assert f(a).shape == (1, 8, 6)
        np.testing.assert_allclose(f(2.0 * a - 3.0 * b), 2.0 * f(a) - 3.0 * f(b), atol=1e-12)
        # the shortcut carries no bias: zero in, zero out
        np.testing.assert_array_equal(f(np.zeros_like(a)), 0.0)


class TestGradients:
    def test_parameters_full_network(self):
        spec, state = mini(1)
        x = positive_batch(4, seed=4)
        y = np.eye(2)[[0, 1, 1, 0]]
        theta64 = state.theta.astype(np.float64)

        def loss(theta):
            st_ = M.NetworkState(theta, state.stats)
            probs, _ = M.forward(spec, st_, x, "train", np.random.default_rng(99))
            return M.K.nll_loss(probs, y)[0]

        _, trace = M.forward(spec, M.NetworkState(theta64, state.stats), x, "train", np.random.default_rng(99))
        analytic = M.backward_params(spec, M.NetworkState(theta64, state.stats), trace, y)
        fd = numeric_grad(loss, theta64, eps=1e-6)
        assert rel_err(analytic, fd) < 1e-3

    def test_parameters_with_weight_decay(self):
        spec, state = mini(2)
        x = positive_batch(3, seed=5)
        y = np.array([0, 1, 0])
        _, trace = M.forward(spec, state, x, "train", np.random.default_rng(0))
        g0 = M.backward_params(spec, state, trace, y, 0.0)
        g1 = M.backward_params(spec, state, trace, y, 0.05)
        mask = M.compile_network(spec).decay_mask
        np.testing.assert_allclose(g1 - g0, 2 * 0.05 * np.where(mask, state.theta, 0.0), atol=1e-12)
        strict = M.backward_params(spec, state, trace, y, 0.05, strict_decay=True)
        np.testing.assert_allclose(strict - g0, 2 * 0.05 * state.theta, atol=1e-12)

    def test_infer_trace_rejected(self):
        spec, state = mini()
        _, trace = M.forward(spec, state, positive_batch(2))
        with pytest.raises(ValueError, match="train-mode"):
            M.backward_params(spec, state, trace, [0, 1])

    def test_final_bias_gradient_closed_form(self):
        spec, state = mini(3)
        x = positive_batch(5, seed=6)
        y = np.eye(2)[[0, 1, 1, 0, 1]]
        probs, trace = M.forward(spec, state, x, "train", np.random.default_rng(0))
        grad = M.backward_params(spec, state, trace, y)
        b = M.compile_network(spec).views(grad)["L7.b"]
        np.testing.assert_allclose(b, (probs - y).mean(axis=0), atol=1e-12)

    def test_input_full_network(self):
        spec, state = mini(4)
        x = positive_batch(1, seed=7)[0]
        for j in (0, 1):
            analytic = M.backward_input(spec, state, x, j)
            fd = numeric_grad(lambda v: M.forward(spec, state, v)[0][0, j], x, eps=1e-6)
            assert rel_err(analytic, fd) < 1e-3

    def test_input_gradients_antisymmetric(self):
        spec, state = mini(5)
        x = positive_batch(3, seed=8)
        np.testing.assert_allclose(M.backward_input(spec, state, x, 0), -M.backward_input(spec, state, x, 1),
                                   atol=1e-6)

    def test_dense_softmax_closed_form(self):
        spec, state = M.build_residualnet(12, 2, 3, schedule=())
        w = M.compile_network(spec).views(state.theta.astype(np.float64))["L0.w"]
        x = positive_batch(1, 12, seed=9)[0]
        f = M.forward(spec, state, x)[0][0]
        np.testing.assert_allclose(M.backward_input(spec, state, x, 0), f[0] * f[1] * (w[0] - w[1]), atol=1e-12)

    def test_class_out_of_range(self):
        spec, state = mini()
        with pytest.raises(ValueError, match="class index"):
            M.backward_input(spec, state, positive_batch(1)[0], 2)


class TestReceptiveField:
    def test_single_conv(self):
        assert M.receptive_field(M.NetworkSpec((M.Residual(1, 3, 1, 1), M.Dense(2)), 20, 2)) == [3]

    def test_depth_two(self):
        assert M.receptive_field(M.NetworkSpec((M.Residual(2, 3, 1, 8), M.Dense(2)), 20, 2)) == [5]

    def test_isotopenet(self):
        spec, _ = mini()
        rf = M.receptive_field(spec)
        assert rf == [5, 17, 37, 77, 77, 107, 107]
        # with 0.25 Da bins the local layer sees about 27 Da, several isotope envelopes wide
        assert 10 <= rf[-1] <= 1000

    def test_past_dense(self):
        spec, _ = mini()
        with pytest.raises(ValueError, match="dense"):
            M.receptive_field(spec, upto=7)


class TestPredict:
    def test_argmax(self):
        assert M.argmax_lowest(np.array([[0.7, 0.3]]))[0] == 0

    def test_tie(self):
        stats = Counter()
        assert M.argmax_lowest(np.array([[0.5, 0.5], [0.2, 0.8]]), stats).tolist() == [0, 1]
        assert stats["prediction_ties"] == 1

    # quarter-unit grid: exact ties stay ties, distinct values stay distinct after exp
    @given(st.lists(st.integers(-80, 80), min_size=2, max_size=5))
    @settings(max_examples=50)
    def test_monotone_invariance(self, z):
        z = np.array([z]) / 4.0
        base = M.argmax_lowest(M.K.softmax(z))
        assert M.argmax_lowest(np.exp(z)) == base
        assert M.argmax_lowest(z ** 3 + 2 * z) == base

    def test_predict_matches_proba(self):
        spec, state = mini()
        x = positive_batch(7)
        np.testing.assert_array_equal(M.predict(spec, state, x), M.predict_proba(spec, state, x).argmax(axis=1))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec, state = mini(7)
        state.stats[:] = np.random.default_rng(0).random(state.stats.size)
        M.save_state(tmp_path / "c.isnet", spec, state)
        spec2, state2, opt = M.load_state(tmp_path / "c.isnet", spec)
        assert spec2 == spec and opt is None
        np.testing.assert_array_equal(state2.theta, state.theta)
        np.testing.assert_array_equal(state2.stats, state.stats)

    def test_mismatched_spec(self, tmp_path):
        spec, state = mini()
        M.save_state(tmp_path / "c.isnet", spec, state)
        other, _ = M.build_isotopenet(160, 2)
        with pytest.raises(M.CheckpointError, match="different"):
            M.load_state(tmp_path / "c.isnet", other)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "junk").write_bytes(b"hello world")
        with pytest.raises(M.CheckpointError):
            M.load_state(tmp_path / "junk")

    def test_resume_matches_uninterrupted(self, tmp_path, small_cohort):
        data, _ = small_cohort
        spec, state = M.build_isotopenet(data.d, 2, 8)
        cfg = TrainConfig(epochs=4, batch_size=64, seed=8)
        full = train(spec, state, data.spectra, data.labels, cfg)
        half = train(spec, state, data.spectra, data.labels, cfg, stop_epoch=2)
        M.save_state(tmp_path / "half.isnet", spec, half.state, half.optimizer)
        _, restored, opt = M.load_state(tmp_path / "half.isnet", spec)
        assert opt.epoch == 2
        resumed = train(spec, restored, data.spectra, data.labels, cfg, resume=opt)
        np.testing.assert_array_equal(resumed.state.theta, full.state.theta)
        np.testing.assert_array_equal(resumed.state.stats, full.state.stats)
