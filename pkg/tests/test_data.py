"""Kinematics, windowing, standardization and splitting."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmflow.data import (
    CH_TTC,
    ChannelStats,
    DataError,
    OBSERVED_LEN,
    SEQ_LEN,
    TrajectoryRecord,
    compute_ttc,
    destandardize,
    differentiate_speed,
    filter_min_ttc,
    pair_channel_stream,
    read_trajectory_csv,
    load_split,
    save_split,
    split_dataset,
    standardize,
    validate_windows,
    window_interactions,
    window_stream,
)
from ssmflow.errors import ConfigError


def make_windows(n, rng=None, ttc_cap=10.0):
    rng = rng or np.random.default_rng(0)
    w = np.zeros((n, SEQ_LEN, 5))
    w[:, :, 0] = rng.uniform(0, 15, (n, SEQ_LEN))
    w[:, :, 1] = rng.uniform(0, 15, (n, SEQ_LEN))
    w[:, :, 2] = rng.uniform(-6, 6, (n, SEQ_LEN))
    w[:, :, 3] = rng.uniform(-6, 6, (n, SEQ_LEN))
    w[:, :, 4] = rng.uniform(0.1, ttc_cap, (n, SEQ_LEN))
    return w


class TestComputeTtc:
    def test_direct_quotient(self):
        assert compute_ttc(10.0, 10.0, 5.0, cap=10.0) == pytest.approx(2.0)

    def test_not_closing_capped(self):
        assert compute_ttc(10.0, 5.0, 5.0, cap=10.0) == pytest.approx(10.0)

    def test_forward_simulation_oracle(self):
        # Independently simulate both vehicles at a fine step until contact;
        # the oracle resolves the contact time only to within one step.
        gap, vf, vl = 3.0, 12.5, 0.5
        dt = 1e-3
        pos_f, pos_l = 0.0, gap
        elapsed = 0.0
        while pos_f < pos_l:
            pos_f += vf * dt
            pos_l += vl * dt
            elapsed += dt
        ttc = compute_ttc(gap, vf, vl, cap=10.0)
        assert abs(ttc - elapsed) <= dt + 1e-9
        assert ttc == pytest.approx(0.25, abs=1e-3)

    def test_rejects_bad_gap(self):
        with pytest.raises(ValueError):
            compute_ttc(0.0, 5.0, 1.0)
        with pytest.raises(ValueError):
            compute_ttc(-2.0, 5.0, 1.0)
        with pytest.raises(ValueError):
            compute_ttc(float("nan"), 5.0, 1.0)
        with pytest.raises(ValueError):
            compute_ttc(1.0, 5.0, 1.0, cap=0.0)

    def test_vectorized_matches_scalar(self):
        gaps = np.array([1.0, 5.0, 20.0])
        out = compute_ttc(gaps, 10.0, 6.0, cap=10.0)
        for g, o in zip(gaps, out):
            assert compute_ttc(float(g), 10.0, 6.0, cap=10.0) == pytest.approx(o)

    @given(
        gap=st.floats(0.1, 100.0),
        extra_gap=st.floats(0.0, 50.0),
        vf=st.floats(0.0, 30.0),
        vl=st.floats(0.0, 30.0),
        extra_closing=st.floats(0.0, 10.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_gap_and_closing(self, gap, extra_gap, vf, vl, extra_closing):
        base = compute_ttc(gap, vf, vl, cap=10.0)
        assert compute_ttc(gap + extra_gap, vf, vl, cap=10.0) >= base
        assert compute_ttc(gap, vf + extra_closing, vl, cap=10.0) <= base


class TestDifferentiateSpeed:
    def test_constant_speed(self):
        accel = differentiate_speed(np.full(20, 7.0), 0.1)
        assert np.allclose(accel, 0.0)

    def test_linear_exact(self):
        t = np.arange(20) * 0.1
        accel = differentiate_speed(2.0 * t, 0.1)
        assert np.allclose(accel, 2.0)

    def test_sine_against_analytic_derivative(self):
        t = np.arange(100) * 0.1
        accel = differentiate_speed(np.sin(t), 0.1)
        assert np.abs(accel[1:-1] - np.cos(t)[1:-1]).max() < 0.01

    def test_rejects_short_series(self):
        with pytest.raises(ValueError):
            differentiate_speed(np.array([1.0, 2.0]), 0.1)
        with pytest.raises(ValueError):
            differentiate_speed(np.arange(5.0), 0.0)

    @given(
        alpha=st.floats(-3.0, 3.0),
        beta=st.floats(-3.0, 3.0),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=50, deadline=None)
    def test_linearity(self, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        v1 = rng.normal(size=12)
        v2 = rng.normal(size=12)
        combined = differentiate_speed(alpha * v1 + beta * v2, 0.1)
        parts = alpha * differentiate_speed(v1, 0.1) + beta * differentiate_speed(v2, 0.1)
        assert np.allclose(combined, parts, atol=1e-10)


class TestWindowing:
    def test_exact_fit(self):
        stream = make_windows(1)[0]
        assert window_stream(stream, 20, 1).shape == (1, 20, 5)

    def test_count_formula(self):
        stream = np.tile(make_windows(1)[0], (2, 1))[:29]
        assert window_stream(stream, 20, 1).shape[0] == 10

    def test_stride_against_brute_enumeration(self):
        rng = np.random.default_rng(3)
        stream = rng.normal(size=(40, 5))
        windows = window_stream(stream, 20, 10)
        expected = [stream[s : s + 20] for s in range(0, 21, 10)]
        assert windows.shape[0] == 3
        for got, want in zip(windows, expected):
            assert np.array_equal(got, want)

    def test_short_stream_empty(self):
        assert window_stream(np.zeros((7, 5)), 20, 1).shape == (0, 20, 5)

    def test_multiple_streams_concatenate(self):
        streams = [np.zeros((25, 5)), np.zeros((10, 5)), np.zeros((20, 5))]
        assert window_interactions(streams, 20, 1).shape[0] == 6 + 0 + 1


class TestFilterMinTtc:
    def test_kept_and_dropped(self):
        w = make_windows(2)
        w[0, :, CH_TTC] = 5.0
        w[0, 3, CH_TTC] = 2.3
        w[1, :, CH_TTC] = 4.01
        out = filter_min_ttc(w, threshold=4.0)
        assert out.shape[0] == 1
        assert np.array_equal(out[0], w[0])

    def test_against_brute_scan(self):
        w = make_windows(100, rng=np.random.default_rng(7))
        out = filter_min_ttc(w, threshold=4.0)
        brute = sum(1 for window in w if min(window[:, CH_TTC]) <= 4.0)
        assert out.shape[0] == brute

    @given(seed=st.integers(0, 2**16), threshold=st.floats(0.5, 9.5))
    @settings(max_examples=25, deadline=None)
    def test_subset_and_idempotent(self, seed, threshold):
        w = make_windows(30, rng=np.random.default_rng(seed))
        out = filter_min_ttc(w, threshold)
        again = filter_min_ttc(out, threshold)
        assert np.array_equal(out, again)
        kept = {arr.tobytes() for arr in out}
        assert kept <= {arr.tobytes() for arr in w}


class TestStandardize:
    def test_identity_stats(self):
        w = make_windows(4)
        assert np.array_equal(standardize(w, ChannelStats.identity()), w)

    def test_round_trip(self):
        w = make_windows(6, rng=np.random.default_rng(11))
        stats = ChannelStats.from_windows(w)
        back = destandardize(standardize(w, stats), stats)
        assert np.abs(back - w).max() < 1e-9

    def test_training_moments_after_transform(self):
        w = make_windows(50, rng=np.random.default_rng(5))
        stats = ChannelStats.from_windows(w)
        z = standardize(w, stats).reshape(-1, 5)
        assert np.abs(z.mean(axis=0)).max() < 1e-6
        assert np.abs(z.std(axis=0) - 1.0).max() < 1e-6

    def test_zero_std_rejected(self):
        with pytest.raises(ConfigError):
            ChannelStats(mean=np.zeros(5), std=np.array([1.0, 1.0, 0.0, 1.0, 1.0]))

    @given(seed=st.integers(0, 2**16))
    @settings(max_examples=25, deadline=None)
    def test_bijection(self, seed):
        rng = np.random.default_rng(seed)
        w = make_windows(3, rng=rng)
        stats = ChannelStats(mean=rng.normal(size=5), std=rng.uniform(0.5, 3.0, size=5))
        assert np.abs(destandardize(standardize(w, stats), stats) - w).max() < 1e-9


class TestSplit:
    def test_ratios_100(self):
        split = split_dataset(make_windows(100), seed=0)
        assert split.sizes() == (80, 10, 10)

    def test_determinism(self):
        w = make_windows(60)
        a = split_dataset(w, seed=9)
        b = split_dataset(w, seed=9)
        assert all(np.array_equal(x, y) for x, y in zip((a.train, a.validation, a.test), (b.train, b.validation, b.test)))

    def test_rounding_rule_55(self):
        split = split_dataset(make_windows(55), seed=1)
        assert split.sizes() in ((44, 5, 6), (44, 6, 5))

    def test_partitions_disjoint_and_cover(self):
        w = make_windows(37)
        split = split_dataset(w, seed=2)
        combined = np.concatenate([split.train, split.validation, split.test])
        assert combined.shape[0] == 37
        assert {a.tobytes() for a in combined} == {a.tobytes() for a in w}

    def test_too_few_windows(self):
        with pytest.raises(ValueError):
            split_dataset(make_windows(9), seed=0)


class TestValidation:
    def test_shape_rejected(self):
        with pytest.raises(DataError):
            validate_windows(np.zeros((2, 19, 5)))

    def test_nonpositive_ttc_rejected(self):
        w = make_windows(1)
        w[0, 0, CH_TTC] = 0.0
        with pytest.raises(DataError):
            validate_windows(w)

    def test_negative_speed_rejected(self):
        w = make_windows(1)
        w[0, 0, 0] = -1.0
        with pytest.raises(DataError):
            validate_windows(w)


class TestPersistence:
    def test_split_round_trip(self, tmp_path):
        w = make_windows(40, rng=np.random.default_rng(13))
        split = split_dataset(w, seed=4)
        stats = ChannelStats.from_windows(split.train)
        save_split(tmp_path, split, stats, filter_threshold=4.0)
        loaded, loaded_stats, meta = load_split(tmp_path)
        assert np.array_equal(loaded.train, split.train)
        assert np.array_equal(loaded.test, split.test)
        assert np.allclose(loaded_stats.mean, stats.mean)
        assert meta["filter_threshold"] == 4.0
        assert meta["sizes"] == [32, 4, 4]

    def test_missing_sidecar(self, tmp_path):
        with pytest.raises(DataError):
            load_split(tmp_path)


class TestTrajectoryCsv:
    def write_csv(self, path, rows):
        lines = ["vehicle_id,timestamp,x,y,vx,vy,yaw"] + rows
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def test_read_and_pair(self, tmp_path):
        rows = []
        for t in range(30):
            rows.append(f"a,{0.1 * t:.1f},{10.0 * 0.1 * t:.3f},0,10,0,0")
            rows.append(f"b,{0.1 * t:.1f},{30 + 4.0 * 0.1 * t:.3f},0,4,0,0")
        path = tmp_path / "traj.csv"
        self.write_csv(path, rows)
        records = read_trajectory_csv(path)
        assert set(records) == {"a", "b"}
        stream = pair_channel_stream(records["a"], records["b"], ttc_cap=10.0)
        assert stream.shape == (30, 5)
        assert stream[0, 0] == pytest.approx(10.0)
        assert stream[0, 1] == pytest.approx(4.0)
        # gap 30 closing 6 -> ttc 5
        assert stream[0, CH_TTC] == pytest.approx(5.0)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,time\n1,0\n", encoding="utf-8")
        with pytest.raises(DataError):
            read_trajectory_csv(path)

    def test_bad_timestep(self, tmp_path):
        path = tmp_path / "traj.csv"
        self.write_csv(path, ["a,0.0,0,0,1,0,0", "a,0.3,0,0,1,0,0", "a,0.4,0,0,1,0,0"])
        with pytest.raises(DataError):
            read_trajectory_csv(path)

    def test_speed_property(self):
        rec = TrajectoryRecord("v", 0.0, 0.0, 0.0, 3.0, 4.0, 0.0)
        assert rec.speed == pytest.approx(5.0)
