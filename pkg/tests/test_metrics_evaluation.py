from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isotopenet import evaluation as E
from isotopenet.metrics import (
    ConfusionCounts,
    balanced_accuracy,
    balanced_accuracy_from_labels,
    core_labels,
    core_majority_vote,
)
from isotopenet.data import make_fold_plan


def labels_for(tp, fn, tn, fp):
    """Truth and prediction vectors with the given confusion counts (class 0 positive)."""
    truth = np.array([0] * (tp + fn) + [1] * (tn + fp))
    pred = np.array([0] * tp + [1] * fn + [1] * tn + [0] * fp)
    return truth, pred


class TestBalancedAccuracy:
    def test_example(self):
        assert balanced_accuracy(ConfusionCounts(9, 1, 15, 5)) == pytest.approx(0.825, abs=1e-15)

    def test_brute_force(self):
        for p in range(1, 21):
            for n in range(1, 21):
                for tp in range(p + 1):
                    for tn in range(n + 1):
                        c = ConfusionCounts(tp, p - tp, tn, n - tn)
                        truth, pred = labels_for(*vars(c).values())
                        assert ConfusionCounts.from_labels(truth, pred) == c
                        ba = balanced_accuracy(c)
                        assert abs(ba - (tp / p + tn / n) / 2) < 1e-15
                        assert abs(balanced_accuracy_from_labels(truth, pred) - ba) < 1e-15

    @given(st.integers(1, 10), st.integers(0, 10), st.integers(1, 10), st.integers(0, 10), st.integers(2, 5))
    def test_duplication_invariant(self, tp, fn, tn, fp, k):
        base = balanced_accuracy(ConfusionCounts(tp, fn, tn, fp))
        assert balanced_accuracy(ConfusionCounts(k * tp, k * fn, k * tn, k * fp)) == pytest.approx(base, abs=1e-15)

    def test_counts_add(self):
        assert ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(1, 1, 1, 1) == ConfusionCounts(2, 3, 4, 5)

    def test_missing_class(self):
        with pytest.raises(ValueError, match="P=0"):
            balanced_accuracy(ConfusionCounts(0, 0, 3, 1))
        with pytest.raises(ValueError):
            ConfusionCounts(-1, 0, 0, 0)


class TestMajorityVote:
    def test_examples(self):
        cores, votes, tallies = core_majority_vote([0, 0, 1, 1, 1, 0, 1], ["a", "a", "a", "b", "b", "c", "c"])
        assert cores.tolist() == ["a", "b", "c"]
        assert votes.tolist() == [0, 1, 0]  # core c ties and goes to class 0
        assert tallies.tolist() == [[2, 1], [0, 2], [1, 1]]

    def test_ties_counted(self):
        stats = Counter()
        core_majority_vote([0, 1, 1, 0, 1], ["x", "x", "y", "y", "z"], stats)
        assert stats["core_ties"] == 2

    def test_order_invariance_and_tally_totals(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(0, 3, 200)
        cores = rng.choice([f"c{i}" for i in range(17)], 200)
        perm = rng.permutation(200)
        a = core_majority_vote(pred, cores)
        b = core_majority_vote(pred[perm], cores[perm])
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        _, counts = np.unique(cores, return_counts=True)
        np.testing.assert_array_equal(a[2].sum(axis=1), counts)
        # brute force per core: the lowest class among the most frequent
        for cid, vote in zip(a[0], a[1]):
            hits = Counter(pred[cores == cid].tolist())
            top = max(hits.values())
            assert vote == min(c for c, v in hits.items() if v == top)

    def test_core_labels(self):
        assert core_labels([1, 1, 0, 0], ["b", "b", "a", "a"]).tolist() == [0, 1]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            core_majority_vote([0, 1], ["a"])


class Oracle:
    """Predicts from a lookup table keyed by the spectrum's first bin; used as a fake model."""

    def __init__(self, data, mode):
        self.data, self.mode = data, mode
        self.name = mode

    def fit(self, train_set, seed, audit=None):
        if audit is not None:
            audit.record("training", train_set.ids)
            if self.mode == "leaky":
                audit.record("training", self.data.ids)
        return self

    def predict(self, spectra, stats=None):
        if self.mode == "constant":
            return np.zeros(len(spectra), dtype=int)
        lookup = {row.tobytes(): lab for row, lab in zip(self.data.spectra, self.data.labels)}
        return np.array([lookup[row.tobytes()] for row in spectra])


@pytest.fixture(scope="module")
def cohort(small_cohort):
    data, _ = small_cohort
    return data, make_fold_plan(data.meta, 4, seed=0)


class TestEvaluation:
    def test_perfect_predictor(self, cohort):
        data, plan = cohort
        for f in range(4):
            res = E.evaluate_fold(Oracle(data, "perfect"), data, plan, f)
            assert res.spot_bal_acc == 1.0 and res.core_bal_acc == 1.0
            assert res.spot.total == len(plan.split(data.meta, f)[1])

    def test_constant_predictor(self, cohort):
        data, plan = cohort
        res = E.evaluate_fold(Oracle(data, "constant"), data, plan, 0)
        assert res.spot_bal_acc == 0.5 and res.core_bal_acc == 0.5

    def test_trained_on_test_fold_detected(self, cohort):
        data, plan = cohort
        fitted = E.FittedNetwork(None, None, train_ids=data.ids)
        with pytest.raises(E.LeakageError):
            E.evaluate_fold(fitted, data, plan, 0)

    def test_leakage_audit(self, cohort):
        data, plan = cohort
        audits = []
        E.cross_validate(Oracle(data, "perfect"), data, plan, n_runs=1, audit_log=audits)
        assert len(audits) == 4
        for _, f, audit in audits:
            train, test = plan.split(data.meta, f)
            assert audit.all_ids() == set(data.ids[train].tolist())
            assert not audit.all_ids() & set(data.ids[test].tolist())
        with pytest.raises(E.LeakageError, match="training"):
            E.cross_validate(Oracle(data, "leaky"), data, plan, n_runs=1)

    def test_audit_digest_is_order_free(self):
        a, b = E.LeakageAudit(), E.LeakageAudit()
        a.record("s", [3, 1, 2])
        b.record("s", [2, 3])
        b.record("s", [1])
        assert a.digest() == b.digest() == a.digest("s")
        assert a.digest("other") != a.digest()


def fake_report(values):
    return E.CvReport("m", 4, len(values), [[] for _ in values], list(values), list(values))


class TestCrossValidation:
    def test_single_run_has_zero_iqr(self, cohort):
        data, plan = cohort
        report = E.cross_validate(Oracle(data, "perfect"), data, plan, n_runs=1)
        assert report.iqr_spot == 0.0 and report.median_spot == 1.0 and report.median_core == 1.0
        assert len(report.rows()) == 4 * 1 * 2

    def test_median_and_iqr(self):
        report = fake_report([0.8, 0.9, 0.85, 0.95])
        assert report.median_spot == pytest.approx(0.875, abs=1e-15)
        assert report.iqr_spot == pytest.approx(np.percentile([0.8, 0.9, 0.85, 0.95], 75) - np.percentile(
            [0.8, 0.9, 0.85, 0.95], 25))
        text = report.summary()
        assert "Bal. Accur. (Spot)" in text and "0.875" in text and "+-" in text

    def test_rows_and_table(self, cohort):
        data, plan = cohort
        report = E.cross_validate(Oracle(data, "constant"), data, plan, n_runs=3)
        rows = report.rows()
        assert len(rows) == 4 * 3 * 2
        assert report.fold_values("core").shape == (3, 4)
        assert report.to_table().count("\n") == 1 + len(rows)
        assert report.run_spot == [0.5, 0.5, 0.5]

    def test_seed_derivation(self):
        assert E.derive_seed(1, 2, 3) == E.derive_seed(1, 2, 3)
        assert len({E.derive_seed(0, r, f) for r in range(4) for f in range(4)}) == 16

    def test_bad_arguments(self, cohort):
        data, plan = cohort
        with pytest.raises(ValueError):
            E.cross_validate(Oracle(data, "perfect"), data, plan, n_runs=0)
        with pytest.raises(ValueError):
            E.cross_validate(Oracle(data, "perfect"), data, plan, n_runs=2, seeds=[1])

    def test_network_method_is_deterministic(self, cohort):
        from isotopenet.training import TrainConfig
        data, plan = cohort
        method = E.NetworkMethod("isotopenet", TrainConfig(epochs=2, batch_size=32))
        a = E.cross_validate(method, data, plan, n_runs=1, master_seed=5)
        b = E.cross_validate(method, data, plan, n_runs=1, master_seed=5)
        assert a.rows() == b.rows()
        np.testing.assert_array_equal(a.folds[0][0].spot_pred, b.folds[0][0].spot_pred)
