import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtdistill import data as dat
from mtdistill.data import DataFormatError, Dataset, EpochSampler, GenSpec, dumps, generate, loads

HEADER = "#mtd\tversion=1\tinput_dim=3\n"


def _small(task, n=10, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    labels = {"AU": (rng.random((n, 8)) < 0.3).astype(int), "EXPR": rng.integers(0, 7, n),
              "VA": np.round(rng.uniform(-1, 1, (n, 2)), 6)}[task]
    return Dataset(task, np.arange(n), rng.normal(size=(n, dim)), labels, ["synth"] * n)


class TestFormat:
    def test_au_line(self):
        d = loads(HEADER + "17\tAU\tsynth\t01000010\t0.125,1.0,-2.5\n")
        inst = d[0]
        assert (inst.id, inst.task, inst.source) == (17, "AU", "synth")
        assert inst.label == (0, 1, 0, 0, 0, 0, 1, 0)
        np.testing.assert_array_equal(inst.features, [0.125, 1.0, -2.5])

    def test_va_range(self):
        assert loads(HEADER + "1\tVA\tx\t-1.000000,1.000000\t0,0,0\n")[0].label == (-1.0, 1.0)
        with pytest.raises(DataFormatError, match="line 2"):
            loads(HEADER + "1\tVA\tx\t-1.000001,0.5\t0,0,0\n")

    @pytest.mark.parametrize("body,match", [
        ("1\tEXPR\tx\t7\t0,0,0", "expression"),
        ("1\tEXPR\tx\t3\t0,0", "3 finite"),
        ("1\tEXPR\tx\t3\t0,nan,0", "finite"),
        ("1\tEXPR\tx\t3", "5 tab"),
        ("1\tPOSE\tx\t3\t0,0,0", "unknown task"),
        ("a\tEXPR\tx\t3\t0,0,0", "non-numeric"),
    ])
    def test_malformed_lines(self, body, match):
        with pytest.raises(DataFormatError, match=match) as info:
            loads(HEADER + "0\tEXPR\tx\t1\t0,0,0\n" + body + "\n")
        assert info.value.lineno == 3

    def test_short_au_label(self):
        with pytest.raises(DataFormatError, match="AU label") as info:
            loads(HEADER + "1\tAU\tx\t0100001\t0,0,0\n")
        assert info.value.lineno == 2

    def test_mixed_tasks(self):
        with pytest.raises(DataFormatError, match="mixed"):
            loads(HEADER + "0\tEXPR\tx\t1\t0,0,0\n1\tAU\tx\t00000000\t0,0,0\n")

    @pytest.mark.parametrize("head", ["#mtd\tversion=2\tinput_dim=3", "#mtx\tversion=1\tinput_dim=3", "", "junk"])
    def test_bad_header(self, head):
        with pytest.raises(DataFormatError) as info:
            loads(head + "\n0\tEXPR\tx\t1\t0,0,0\n")
        assert info.value.lineno == 1

    def test_version_message(self):
        with pytest.raises(DataFormatError, match="version 2"):
            loads("#mtd\tversion=2\tinput_dim=3\n")

    @pytest.mark.parametrize("task", dat.TASKS)
    def test_save_load_save(self, tmp_path, task):
        d = _small(task)
        dat.save(d, tmp_path / "a.mtd")
        back = dat.load(tmp_path / "a.mtd")
        dat.save(back, tmp_path / "b.mtd")
        assert (tmp_path / "a.mtd").read_bytes() == (tmp_path / "b.mtd").read_bytes()
        assert back.equals(d)

    @settings(max_examples=100)
    @given(st.sampled_from(dat.TASKS), st.integers(1, 12), st.integers(1, 5), st.integers(0, 2**32))
    def test_round_trip_property(self, task, n, dim, seed):
        d = _small(task, n, dim, seed)
        back = loads(dumps(d))
        assert back.task == task
        np.testing.assert_array_equal(back.features, d.features)
        np.testing.assert_array_equal(back.labels, d.labels)
        np.testing.assert_array_equal(back.ids, d.ids)

    def test_round_trip_many_random_datasets(self):
        rng = np.random.default_rng(7)
        for k in range(1000):
            task = dat.TASKS[k % 3]
            d = _small(task, int(rng.integers(1, 6)), int(rng.integers(1, 4)), seed=k)
            assert loads(dumps(d)).equals(d)

    def test_va_stored_to_six_decimals(self):
        d = Dataset("VA", [0], np.zeros((1, 1)), [[0.12345678, -0.5]], ["s"])
        assert loads(dumps(d)).labels[0, 0] == 0.123457

    def test_source_with_tab_rejected(self):
        d = Dataset("EXPR", [0], np.zeros((1, 1)), [1], ["a\tb"])
        with pytest.raises(ValueError):
            dumps(d)


class TestDataset:
    def test_validation(self):
        with pytest.raises(ValueError):
            Dataset("EXPR", [0, 1], np.zeros((2, 2)), [0], ["s", "s"])
        with pytest.raises(ValueError):
            Dataset("VA", [0], np.zeros((1, 2)), [[1.5, 0.0]], ["s"])
        with pytest.raises(ValueError):
            Dataset("AU", [0], np.zeros((1, 2)), [[2] * 8], ["s"])
        with pytest.raises(ValueError):
            Dataset("EXPR", [0], np.full((1, 2), np.inf), [0], ["s"])

    def test_concat_and_take(self):
        a, b = _small("EXPR", 4), _small("EXPR", 3, seed=1)
        c = dat.concat([a, b])
        assert len(c) == 7
        assert c.take([4, 5, 6]).equals(b)
        with pytest.raises(ValueError):
            dat.concat([a, _small("AU", 2)])


class TestGenerator:
    def test_deterministic(self):
        a, b = generate(GenSpec(counts=(50, 50, 50), seed=4)), generate(GenSpec(counts=(50, 50, 50), seed=4))
        assert all(x.equals(y) for x, y in zip(a, b))

    def test_noise_free_is_function_of_latent(self):
        au, _, _ = generate(GenSpec(counts=(200, 4, 4), noise_sigma=0.0, seed=1))
        # Rank <= latent_dim without noise.
        assert np.linalg.matrix_rank(au.features) == 4

    def test_va_open_interval(self):
        _, _, va = generate(GenSpec(counts=(4, 4, 5000), imbalance_skew=3.0))
        assert np.all(np.abs(va.labels) < 1.0)

    def test_expression_classes_within_three_times(self):
        for seed in range(5):
            _, expr, _ = generate(GenSpec(counts=(4, 10_000, 4), seed=seed))
            freq = np.bincount(expr.labels, minlength=7)
            assert freq.min() > 0 and freq.max() <= 3 * freq.min()

    def test_au_minority_labels(self):
        au, _, _ = generate(GenSpec(counts=(10_000, 4, 4)))
        rates = au.labels.mean(axis=0)
        np.testing.assert_allclose(rates, dat.AU_BASE_RATES, atol=0.03)

    def test_skew_increases_imbalance(self):
        from mtdistill.balance import mean_ir

        def mir(skew):
            au, _, _ = generate(GenSpec(counts=(5000, 4, 4), imbalance_skew=skew, seed=3))
            return mean_ir(dict(enumerate(au.labels.sum(axis=0))))

        assert mir(2.0) > mir(0.0)

    def test_splits_share_maps_not_draws(self):
        spec = GenSpec(counts=(30, 30, 30), seed=2)
        train, val = dat.generate_splits(spec, (10, 10, 10))
        assert all(a.equals(b) for a, b in zip(train, generate(spec)))
        assert not np.allclose(train[0].features[:10], val[0].features)

    def test_linear_probe_beats_chance(self):
        _, expr, _ = generate(GenSpec(counts=(4, 3000, 4), seed=0))
        x = np.hstack([expr.features, np.ones((len(expr), 1))])
        y = np.eye(7)[expr.labels]
        w, *_ = np.linalg.lstsq(x[:2000], y[:2000], rcond=None)
        acc = np.mean(np.argmax(x[2000:] @ w, axis=1) == expr.labels[2000:])
        assert acc > 2 / 7

    @pytest.mark.parametrize("kwargs", [{"counts": (3, 10, 10)}, {"noise_sigma": -1}, {"imbalance_skew": -0.5},
                                        {"counts": (10, 10)}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            GenSpec(**kwargs)


class TestSampler:
    def _triple(self, sizes=(10, 10, 10)):
        return tuple(_small(t, n, seed=i) for i, (t, n) in enumerate(zip(dat.TASKS, sizes)))

    def test_three_batches_per_epoch(self):
        sampler = EpochSampler(self._triple(), n=3, seed=0)
        batches = list(sampler.iter_epoch())
        assert len(batches) == sampler.batches_per_epoch == 3
        assert all(b.sizes == (3, 3, 3) for b in batches)
        assert sampler.epoch == 1

    def test_union_is_permutation_prefix(self):
        data = self._triple()
        sampler = EpochSampler(data, n=3, seed=5)
        batches = list(sampler.iter_epoch())
        rng = np.random.default_rng(np.random.SeedSequence([5, 0]))
        for task in range(3):
            order = rng.permutation(10)
            drawn = np.concatenate([b.ids[task] for b in batches])
            np.testing.assert_array_equal(drawn, order[:9])
            assert len(set(drawn.tolist())) == 9

    def test_same_seed_same_sequence(self):
        def ids(seed):
            return [np.concatenate(b.ids).tolist() for b in EpochSampler(self._triple(), 2, seed).iter_epoch()]

        assert ids(3) == ids(3)
        assert ids(3) != ids(4)

    def test_epochs_reshuffle(self):
        sampler = EpochSampler(self._triple(), 2, seed=1)
        first = [b.ids[0].tolist() for b in sampler.iter_epoch()]
        second = [b.ids[0].tolist() for b in sampler.iter_epoch()]
        assert first != second
        assert sorted(sum(first, [])) == sorted(sum(second, []))

    def test_unequal_pools(self):
        data = self._triple((10, 25, 13))
        assert EpochSampler(data, 4).batches_per_epoch == 2
        cycling = EpochSampler(data, 4, cycle_smaller=True)
        batches = list(cycling.iter_epoch())
        assert len(batches) == 6
        assert all(b.sizes == (4, 4, 4) for b in batches)

    def test_plan_pools(self):
        data = self._triple()
        pools = (np.repeat(np.arange(10), 2), np.arange(10), np.arange(10))
        sampler = EpochSampler(data, 5, pools=pools, cycle_smaller=True)
        drawn = np.concatenate([b.ids[0] for b in sampler.iter_epoch()])
        assert np.all(np.bincount(drawn, minlength=10) == 2)

    def test_too_small(self):
        with pytest.raises(ValueError):
            EpochSampler(self._triple((2, 10, 10)), 3)
        with pytest.raises(ValueError):
            EpochSampler(self._triple(), 0)
