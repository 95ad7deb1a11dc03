"""Evaluation harness: Dice, fold counts, histogram MI, runtime, records."""

import numpy as np
import pytest

from mireg import evalkit as ev
from mireg.errors import ConfigurationError, FormatError


class TestDice:
    def test_perfect_overlap(self):
        rng = np.random.default_rng(0)
        lab = rng.integers(0, 4, (20, 20)).astype(np.uint16)
        per_label, mean = ev.dice(lab, lab)
        assert mean == 1.0
        assert all(v == 1.0 for v in per_label.values())

    def test_disjoint_regions_score_zero(self):
        a = np.zeros((10, 10), np.uint16)
        b = np.zeros((10, 10), np.uint16)
        a[:3, :3] = 1
        b[6:, 6:] = 1
        _, mean = ev.dice(a, b)
        assert mean == 0.0

    def test_half_overlapping_squares(self):
        # area A squares overlapping by A/2: dice = 2(A/2)/(2A) = 0.5
        a = np.zeros((12, 12), np.uint16)
        b = np.zeros((12, 12), np.uint16)
        a[2:6, 2:6] = 1      # 16 voxels
        b[2:6, 4:8] = 1      # shifted: 8 shared
        per_label, mean = ev.dice(a, b)
        assert mean == 0.5

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a = rng.integers(0, 5, (15, 15)).astype(np.uint16)
        b = rng.integers(0, 5, (15, 15)).astype(np.uint16)
        assert ev.dice(a, b) == ev.dice(b, a)

    def test_label_absent_from_both_excluded(self):
        a = np.zeros((8, 8), np.uint16)
        b = np.zeros((8, 8), np.uint16)
        a[:4] = 1
        b[:4] = 1
        a[0, 0] = 3  # label 2 skipped entirely: must not appear
        b[0, 0] = 3
        per_label, _ = ev.dice(a, b)
        assert set(per_label) == {1, 3}

    def test_background_only_is_error(self):
        z = np.zeros((5, 5), np.uint16)
        with pytest.raises(ConfigurationError):
            ev.dice(z, z)


class TestJacobianCounting:
    def test_identity_has_no_folds(self):
        count, frac = ev.count_nonpositive_jacobian(np.zeros((2, 10, 10), np.float32))
        assert count == 0 and frac == 0.0

    def test_constructed_fold_is_counted(self):
        u = np.zeros((2, 10, 10), np.float32)
        u[0, 5, :] = -2.0
        count, frac = ev.count_nonpositive_jacobian(u)
        assert count > 0
        assert frac == pytest.approx(count / 64)


class TestBinnedMi:
    def test_self_mi_of_ramp_is_log_bins(self):
        a = np.linspace(0.0, 1.0, 2 ** 17)
        mi = ev.binned_mi(a, a, bins=64)
        assert mi == pytest.approx(np.log(64), abs=0.02)

    def test_independent_noise_near_zero(self):
        rng = np.random.default_rng(2)
        a = rng.random(10 ** 5)
        b = rng.random(10 ** 5)
        assert ev.binned_mi(a, b, bins=16) <= 0.02

    def test_bijection_invariance(self):
        a = np.linspace(0.0, 1.0, 2 ** 17)
        assert ev.binned_mi(a, 1.0 - a) == pytest.approx(ev.binned_mi(a, a), abs=1e-9)

    def test_nonnegative_and_self_maximal(self):
        rng = np.random.default_rng(3)
        a = rng.random(5000)
        b = rng.random(5000)
        assert ev.binned_mi(a, b) >= 0.0
        assert ev.binned_mi(a, a) >= ev.binned_mi(a, b)


class TestBenchmarkRuntime:
    def test_injected_clock_measures_only_the_call(self):
        ticks = iter(range(100))
        calls = []

        def fake_clock():
            return float(next(ticks))

        med, sd = ev.benchmark_runtime(lambda: calls.append(1), repeats=5,
                                       clock=fake_clock)
        assert len(calls) == 5
        assert med == 1.0 and sd == 0.0  # consecutive ticks differ by 1

    def test_single_repeat_reports_zero_sd(self):
        med, sd = ev.benchmark_runtime(lambda: None, repeats=1)
        assert sd == 0.0

    def test_zero_repeats_rejected(self):
        with pytest.raises(ConfigurationError):
            ev.benchmark_runtime(lambda: None, repeats=0)


class TestEvalRecords:
    def _record(self, alpha=1.0, method="mine-local"):
        return ev.EvalRecord(method=method, alpha=alpha, lam=10.0, seed=7,
                             mean_dice=0.8125, dice_per_label={1: 0.9, 2: 0.725},
                             nonpos_jac_count=0, nonpos_jac_frac=0.0,
                             runtime_s_median=0.123456789, runtime_s_sd=0.01)

    def test_csv_round_trip_exact(self, tmp_path):
        recs = [self._record(a) for a in (0.5, 1.0, 2.0)]
        path = tmp_path / "r.csv"
        ev.write_records(path, recs)
        assert ev.read_records(path) == recs

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("method,alpha\nx,1\n")
        with pytest.raises(FormatError):
            ev.read_records(path)

    def test_dice_out_of_range_rejected(self):
        with pytest.raises(ConfigurationError):
            ev.EvalRecord(method="m", alpha=1, lam=1, seed=0, mean_dice=1.5,
                          dice_per_label={}, nonpos_jac_count=0,
                          nonpos_jac_frac=0, runtime_s_median=0, runtime_s_sd=0)

    def test_sweep_grid_cardinality_and_order(self):
        out = ev.sweep_alpha([2.0, 0.5], ["b", "a"],
                             lambda m, a: self._record(alpha=a, method=m))
        assert len(out) == 4
        assert [(r.alpha, r.method) for r in out] == [
            (0.5, "a"), (0.5, "b"), (2.0, "a"), (2.0, "b")]

    def test_sweep_needs_two_alphas(self):
        with pytest.raises(ConfigurationError):
            ev.sweep_alpha([1.0], ["a"], lambda m, a: self._record())
