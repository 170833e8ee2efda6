import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtdistill import balance as bal
from mtdistill.data import Dataset, EpochSampler, GenSpec, generate
from mtdistill.numerics import VA_GRID


def au_rows(pattern_counts):
    """Stack ``{bit-string: repeats}`` into an (n, 8) label matrix."""
    rows = [[int(c) for c in bits.ljust(8, "0")] for bits, k in pattern_counts.items() for _ in range(k)]
    return np.array(rows, dtype=np.int64)


def brute_force_ml_ros(counts_a, counts_b, pct):
    """Round loop on a two-label set whose labels never co-occur; returns final counts."""
    n = counts_a + counts_b
    budget = int(n * pct / 100)
    counts = {"A": counts_a, "B": counts_b}
    added = 0
    while added < budget:
        top = max(counts.values())
        ir = {k: top / v for k, v in counts.items()}
        mir = sum(ir.values()) / 2
        minority = [k for k in ("A", "B") if ir[k] > mir]
        if not minority:
            break
        for k in minority:
            if added >= budget:
                break
            counts[k] += 1
            added += 1
    return counts


def va_dataset(values):
    values = np.asarray(values, dtype=float)
    n = len(values)
    return Dataset("VA", np.arange(n), np.zeros((n, 2)), values, ["t"] * n)


class TestImbalanceRatios:
    def test_example(self):
        ir = bal.irlbl({"A": 100, "B": 25, "C": 50})
        assert ir == {"A": 1.0, "B": 4.0, "C": 2.0}
        assert bal.mean_ir({"A": 100, "B": 25, "C": 50}) == pytest.approx(7 / 3, abs=1e-4)

    def test_two_labels(self):
        assert bal.mean_ir({"A": 100, "B": 1}) == pytest.approx(50.5)

    def test_balanced(self):
        assert bal.mean_ir({k: 10 for k in "ABCD"}) == 1.0

    def test_zero_count_warns(self):
        with pytest.warns(UserWarning, match="no positive"):
            ir = bal.irlbl({"A": 10, "B": 0, "C": 5})
        assert set(ir) == {"A", "C"}

    @given(st.dictionaries(st.text(min_size=1, max_size=3), st.integers(1, 1000), min_size=1, max_size=10))
    def test_mean_ir_at_least_one(self, counts):
        assert bal.mean_ir(counts) >= 1.0


@pytest.mark.filterwarnings("ignore:AU labels")
class TestMLROS:
    def test_two_label_oracle(self):
        labels = au_rows({"1": 8, "01": 2})
        plan, report = bal.ml_ros(labels, 50, seed=0)
        want = brute_force_ml_ros(8, 2, 50)
        assert want == {"A": 8, "B": 7}
        assert report.after[:2] == [8, 7]
        assert report.mean_ir_after == pytest.approx((1 + 8 / 7) / 2, abs=1e-12)
        assert report.mean_ir_after < report.mean_ir_before

    @pytest.mark.parametrize("a,b,pct", [(8, 2, 50), (30, 3, 25), (12, 5, 100), (50, 1, 10)])
    def test_matches_brute_force(self, a, b, pct):
        _, report = bal.ml_ros(au_rows({"1": a, "01": b}), pct, seed=1)
        want = brute_force_ml_ros(a, b, pct)
        assert report.after[:2] == [want["A"], want["B"]]

    def test_balanced_set_untouched(self):
        plan, report = bal.ml_ros(au_rows({"11111111": 5}), 25)
        assert plan.epoch_size == 5
        assert report.mean_ir_before == report.mean_ir_after == 1.0

    def test_co_occurrence_limits_reduction(self):
        # Every B-positive row also carries A, so cloning B also inflates A.
        tied_plan, tied = bal.ml_ros(au_rows({"1": 16, "11": 4, "001": 20}), 25, seed=0)
        _, free_rep = bal.ml_ros(au_rows({"1": 20, "01": 4, "001": 20}), 25, seed=0)
        tied_drop = tied.mean_ir_before - tied.mean_ir_after
        free_drop = free_rep.mean_ir_before - free_rep.mean_ir_after
        assert 0 < tied_drop < free_drop

    def test_never_removes_and_respects_budget(self, rng):
        labels = (rng.random((200, 8)) < np.linspace(0.5, 0.03, 8)).astype(int)
        plan, report = bal.ml_ros(labels, 25, seed=3)
        assert np.all(plan.counts >= 1)
        assert plan.epoch_size - 200 <= 50
        assert report.mean_ir_after <= report.mean_ir_before

    def test_zero_label_skipped_with_warning(self):
        with pytest.warns(UserWarning):
            plan, report = bal.ml_ros(au_rows({"1": 8, "01": 2}), 50)
        assert report.zero_labels == [2, 3, 4, 5, 6, 7]

    def test_deterministic(self, rng):
        labels = (rng.random((100, 8)) < 0.2).astype(int)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a, _ = bal.ml_ros(labels, 25, seed=9)
            b, _ = bal.ml_ros(labels, 25, seed=9)
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_on_generated_data(self):
        for seed in range(4):
            au, _, _ = generate(GenSpec(counts=(1000, 4, 4), imbalance_skew=0.5, seed=seed))
            _, report = bal.ml_ros(au, 25, seed)
            assert report.mean_ir_after < report.mean_ir_before

    def test_invalid(self):
        with pytest.raises(ValueError):
            bal.ml_ros(np.zeros((0, 8)), 25)
        with pytest.raises(ValueError):
            bal.ml_ros(au_rows({"1": 2}), -1)


class TestClassResample:
    def test_example(self):
        labels = np.repeat([0, 1, 2], [700, 200, 100])
        plan = bal.class_resample(labels, num_classes=3, epoch_size=999)
        assert np.bincount(labels, weights=plan.counts).tolist() == [333, 333, 333]

    def test_seven_classes(self, rng):
        labels = rng.permutation(np.repeat(np.arange(7), [300, 200, 80, 50, 40, 20, 10]))
        plan = bal.class_resample(labels, epoch_size=700)
        assert np.bincount(labels, weights=plan.counts).tolist() == [100] * 7

    def test_uniform_is_identity(self):
        labels = np.tile(np.arange(7), 5)
        np.testing.assert_array_equal(bal.class_resample(labels).counts, np.ones(35))

    @given(st.lists(st.integers(1, 60), min_size=7, max_size=7), st.integers(7, 2000), st.integers(0, 100))
    def test_counts_differ_by_at_most_one(self, sizes, epoch, seed):
        labels = np.repeat(np.arange(7), sizes)
        plan = bal.class_resample(labels, epoch_size=epoch, seed=seed)
        per_class = np.bincount(labels, weights=plan.counts, minlength=7)
        assert per_class.sum() == epoch
        assert per_class.max() - per_class.min() <= 1
        for c in range(7):
            within = plan.counts[labels == c]
            assert within.max() - within.min() <= 1

    def test_missing_class(self):
        with pytest.raises(ValueError, match="class 3"):
            bal.class_resample(np.array([0, 1, 2, 4, 5, 6]))

    def test_empirical_frequencies(self):
        au, expr, va = generate(GenSpec(counts=(40, 700, 40), imbalance_skew=1.0, seed=2))
        plan = bal.class_resample(expr, seed=2)
        sampler = EpochSampler((au, expr, va), n=4, seed=2, pools=(np.arange(40), plan.expand(), np.arange(40)), cycle_smaller=True)
        seen = np.zeros(7)
        for _ in range(100):
            for batch in sampler.iter_epoch():
                seen += np.bincount(batch.expr_y, minlength=7)
        freq = seen / seen.sum()
        assert np.max(np.abs(freq * 7 - 1)) < 0.05


class TestVABins:
    def test_single_cell_is_identity(self):
        plan = bal.va_bin_resample(va_dataset([[0.01, 0.02]] * 6))
        np.testing.assert_array_equal(plan.counts, np.ones(6))

    def test_two_cells(self):
        values = [[0.05, 0.05]] * 90 + [[-0.55, 0.75]] * 10
        plan = bal.va_bin_resample(va_dataset(values), epoch_size=100)
        assert plan.counts[:90].sum() == 50 and plan.counts[90:].sum() == 50

    def test_three_cells(self):
        values = [[0.05, 0.05]] * 80 + [[-0.55, 0.75]] * 15 + [[0.95, -0.95]] * 5
        plan = bal.va_bin_resample(va_dataset(values), epoch_size=99)
        assert [plan.counts[:80].sum(), plan.counts[80:95].sum(), plan.counts[95:].sum()] == [33, 33, 33]

    @given(st.integers(0, 1000), st.integers(50, 3000))
    @settings(max_examples=25)
    def test_ceiling_bound(self, seed, epoch):
        rng = np.random.default_rng(seed)
        values = np.tanh(rng.normal(scale=0.8, size=(300, 2)))
        plan = bal.va_bin_resample(va_dataset(values), epoch_size=epoch, seed=seed)
        codes = bal.va_cells(values)
        counts = np.array([plan.counts[codes == c].sum() for c in np.unique(codes)])
        k = epoch // len(counts)
        assert counts.sum() == epoch
        assert k <= counts.min() and counts.max() <= k + 1

    def test_marginal_mode(self):
        values = [[0.05, 0.05]] * 90 + [[-0.55, 0.75]] * 10
        plan = bal.va_bin_resample(va_dataset(values), epoch_size=100, joint=False)
        assert plan.epoch_size == 100
        assert plan.counts[:90].sum() == 50

    def test_report(self):
        values = [[0.05, 0.05]] * 3 + [[-0.55, 0.75]]
        plan = bal.va_bin_resample(va_dataset(values), epoch_size=4)
        report = bal.va_report(values, plan)
        assert report.before == [1, 3] and report.after == [2, 2]
        assert report.labels == ["4:17", "10:10"]


class TestMergeDownsample:
    def _data(self, n, source, task="EXPR"):
        return Dataset(task, np.arange(n), np.zeros((n, 3)), np.zeros(n, int), [source] * n)

    def test_concat(self):
        out = bal.merge_downsample(self._data(7, "p"), self._data(3, "e"), 1)
        assert len(out) == 10

    @pytest.mark.parametrize("n,stride", [(1000, 5), (7, 3), (10, 4)])
    def test_stride(self, n, stride):
        out = bal.merge_downsample(self._data(n, "p"), self._data(11, "e"), stride)
        sources = list(out.sources)
        assert (sources.count("p"), sources.count("e")) == (-(-n // stride), 11)
        np.testing.assert_array_equal(out.ids[: -(-n // stride)], np.arange(0, n, stride))

    def test_schema_mismatch(self):
        other = Dataset("AU", [0], np.zeros((1, 3)), np.zeros((1, 8)), ["e"])
        with pytest.raises(ValueError, match="schema"):
            bal.merge_downsample(self._data(3, "p"), other)

    def test_bad_stride(self):
        with pytest.raises(ValueError):
            bal.merge_downsample(self._data(3, "p"), self._data(3, "e"), 0)


class TestPlansAndReports:
    def test_plan_helpers(self):
        plan = bal.SamplingPlan([2, 0, 1])
        assert plan.epoch_size == 3
        np.testing.assert_array_equal(plan.expand(), [0, 0, 2])
        assert plan.pairs() == [(0, 2), (1, 0), (2, 1)]
        with pytest.raises(ValueError):
            bal.SamplingPlan([-1])

    def test_report_serializations(self):
        rep = bal.BalanceReport(["A", "B", "C"], [100, 25, 50], [100, 50, 50])
        rec = json.loads(rep.to_json())
        assert rec["mean_ir_before"] == pytest.approx(2.333333)
        assert rec["mean_ir_after"] == pytest.approx(1.666667)
        assert rep.to_csv().splitlines() == ["label,before,after", "A,100,100", "B,25,50", "C,50,50"]
        assert "MeanIR before 2.3333  after 1.6667" in rep.to_text()

    def test_balance_all(self):
        data = generate(GenSpec(counts=(400, 300, 300), imbalance_skew=1.0, seed=1))
        out, reports = bal.balance_all(data, 25, seed=1)
        assert set(reports) == {"au", "expr", "va"}
        assert len(out[1]) == 300 and len(out[2]) == 300
        assert 400 < len(out[0]) <= 500
        again, _ = bal.balance_all(data, 25, seed=1)
        assert all(a.equals(b) for a, b in zip(out, again))
