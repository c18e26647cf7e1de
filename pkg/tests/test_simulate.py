"""Scenario generator and brute-force crash oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmflow.data import CH_TTC, compute_ttc
from ssmflow.errors import ConfigError
from ssmflow.simulate import (
    ScenarioConfig,
    critical_window,
    default_suite,
    load_streams,
    oracle_crash_probability,
    save_streams,
    simulate_interaction,
    suite_windows,
)

# Reference scenario whose oracle value is frozen as a regression constant.
REFERENCE = ScenarioConfig(
    initial_gap=15.0,
    leader_speed=0.0,
    follower_speed=8.0,
    leader_profile="stopped",
    trigger_ttc=1.5,
    brake_range=(-6.0, -3.0),
    accel_noise_std=0.3,
    reaction_delay=2,
    horizon=60,
)
REFERENCE_CRASH_PROBABILITY = 0.0915  # first run, n=2000, seed=42


def no_closing_config(**overrides):
    base = dict(
        initial_gap=20.0,
        leader_speed=8.0,
        follower_speed=8.0,
        leader_profile="constant",
        trigger_ttc=1.5,
        accel_noise_std=0.0,
        horizon=40,
    )
    base.update(overrides)
    return ScenarioConfig(**base)


class TestSimulateInteraction:
    def test_no_closing_gives_capped_ttc(self):
        trace = simulate_interaction(no_closing_config(), seed=0)
        assert trace.channels.shape == (40, 5)
        assert np.all(trace.channels[:, CH_TTC] == 10.0)
        assert not trace.crashed

    def test_constant_speed_contact_time(self):
        config = no_closing_config(initial_gap=10.0, follower_speed=13.0, trigger_ttc=0.0)
        trace = simulate_interaction(config, seed=0)
        assert trace.crashed
        assert trace.crash_step == 20
        assert trace.channels.shape[0] == 20
        assert trace.gap[-1] == pytest.approx(0.5)

    def test_seed_determinism(self):
        a = simulate_interaction(REFERENCE, seed=123)
        b = simulate_interaction(REFERENCE, seed=123)
        assert np.array_equal(a.channels, b.channels)
        assert a.crashed == b.crashed

    def test_speed_integrates_acceleration(self):
        trace = simulate_interaction(REFERENCE, seed=5)
        v = trace.channels[:, 0]
        a = trace.channels[:, 2]
        assert np.abs(v[1:] - (v[:-1] + a[:-1] * 0.1)).max() < 1e-9
        vl = trace.channels[:, 1]
        al = trace.channels[:, 3]
        assert np.abs(vl[1:] - (vl[:-1] + al[:-1] * 0.1)).max() < 1e-9

    def test_ttc_matches_kinematics(self):
        trace = simulate_interaction(REFERENCE, seed=6)
        expected = compute_ttc(trace.gap, trace.channels[:, 0], trace.channels[:, 1], cap=10.0)
        assert np.allclose(trace.channels[:, CH_TTC], expected)

    def test_braking_engages_after_delay(self):
        config = ScenarioConfig(
            initial_gap=20.0,
            leader_speed=0.0,
            follower_speed=10.0,
            leader_profile="stopped",
            trigger_ttc=1.5,
            brake_range=(-4.0, -4.0),
            accel_noise_std=0.0,
            reaction_delay=3,
            horizon=60,
        )
        trace = simulate_interaction(config, seed=0)
        ttc = trace.channels[:, CH_TTC]
        trigger_step = int(np.argmax(ttc < 1.5))
        accel = trace.channels[:, 2]
        assert np.all(accel[: trigger_step + 3] == 0.0)
        braking = accel[trigger_step + 3 :]
        moving = trace.channels[trigger_step + 3 :, 0] > 0
        assert np.all(braking[moving] < 0.0)

    def test_decelerating_leader_stops(self):
        config = ScenarioConfig(
            initial_gap=50.0,
            leader_speed=3.0,
            follower_speed=3.0,
            leader_profile="decelerating",
            trigger_ttc=0.0,
            accel_noise_std=0.0,
            horizon=40,
            leader_decel=-2.0,
        )
        trace = simulate_interaction(config, seed=0)
        assert trace.channels[-1, 1] == 0.0
        assert np.all(np.diff(trace.channels[:, 1]) <= 1e-12)

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            ScenarioConfig(initial_gap=0.0, leader_speed=1.0, follower_speed=1.0)
        with pytest.raises(ConfigError):
            ScenarioConfig(initial_gap=1.0, leader_speed=1.0, follower_speed=1.0, horizon=10)
        with pytest.raises(ConfigError):
            ScenarioConfig(initial_gap=1.0, leader_speed=1.0, follower_speed=1.0, brake_range=(-8.0, 0.0))
        with pytest.raises(ConfigError):
            ScenarioConfig(initial_gap=1.0, leader_speed=1.0, follower_speed=1.0, leader_profile="warp")


class TestOracle:
    def test_guaranteed_crash(self):
        config = no_closing_config(initial_gap=10.0, follower_speed=13.0, trigger_ttc=0.0)
        est = oracle_crash_probability(config, 100, seed=0)
        assert est.crash_probability == 1.0
        assert est.binomial_stderr == 0.0

    def test_never_closing(self):
        est = oracle_crash_probability(no_closing_config(), 100, seed=0)
        assert est.crash_probability == 0.0

    def test_reference_regression_constant(self):
        est = oracle_crash_probability(REFERENCE, 2000, seed=42)
        assert est.crash_probability == pytest.approx(REFERENCE_CRASH_PROBABILITY, abs=1e-12)
        # 95% binomial CI sanity
        assert est.binomial_stderr == pytest.approx(
            np.sqrt(est.crash_probability * (1 - est.crash_probability) / 2000)
        )

    def test_requires_enough_rollouts(self):
        with pytest.raises(ValueError):
            oracle_crash_probability(REFERENCE, 50)

    def test_trigger_monotonicity(self):
        # Braking later (smaller trigger) never reduces crash risk beyond noise.
        triggers = [2.5, 2.0, 1.5, 1.0, 0.5]
        estimates = []
        for trig in triggers:
            config = ScenarioConfig(
                initial_gap=15.0,
                leader_speed=0.0,
                follower_speed=8.0,
                leader_profile="stopped",
                trigger_ttc=trig,
                brake_range=(-6.0, -3.0),
                accel_noise_std=0.3,
                reaction_delay=2,
                horizon=60,
            )
            estimates.append(oracle_crash_probability(config, 400, seed=11))
        for earlier, later in zip(estimates[:-1], estimates[1:]):
            slack = 3.0 * np.hypot(earlier.binomial_stderr, later.binomial_stderr)
            assert later.crash_probability >= earlier.crash_probability - slack

    def test_conflict_configs_dominate_normal_min_ttc(self):
        conflict = ScenarioConfig(
            initial_gap=20.0,
            leader_speed=0.0,
            follower_speed=10.0,
            leader_profile="stopped",
            trigger_ttc=1.5,
            accel_noise_std=0.3,
            horizon=60,
        )
        normal = no_closing_config(accel_noise_std=0.3, trigger_ttc=3.0, initial_gap=60.0)
        min_ttc = lambda cfg, seeds: np.median(
            [simulate_interaction(cfg, seed=s).channels[:, CH_TTC].min() for s in seeds]
        )
        seeds = range(50)
        assert min_ttc(conflict, seeds) < min_ttc(normal, seeds)


class TestSuiteAndPersistence:
    def test_default_suite_valid_and_spanning(self):
        suite = default_suite()
        assert len(suite) >= 20
        assert {c.leader_profile for c in suite} == {"stopped", "constant", "decelerating"}

    def test_suite_windows_shapes(self):
        windows = suite_windows(default_suite()[:3], rollouts_per_config=2, seed=0, stride=10)
        assert windows.ndim == 3 and windows.shape[1:] == (20, 5)
        assert windows.shape[0] > 0

    def test_critical_window_targets_min_ttc(self):
        trace = simulate_interaction(REFERENCE, seed=9)
        window = critical_window(trace)
        assert window.shape == (20, 5)
        idx = int(trace.channels[:, CH_TTC].argmin())
        end = max(20, idx + 1)
        assert np.array_equal(window, trace.channels[end - 20 : end])

    def test_critical_window_short_trace(self):
        config = no_closing_config(initial_gap=2.0, follower_speed=13.0, trigger_ttc=0.0)
        trace = simulate_interaction(config, seed=0)
        assert trace.channels.shape[0] < 20
        assert critical_window(trace) is None

    def test_stream_round_trip(self, tmp_path):
        configs = default_suite()[:2]
        traces = [simulate_interaction(c, seed=i) for i, c in enumerate(configs * 2)]
        save_streams(tmp_path, traces, configs, [0, 1, 0, 1], seed=3)
        streams, meta = load_streams(tmp_path)
        assert len(streams) == 4
        for got, trace in zip(streams, traces):
            assert np.array_equal(got, trace.channels)
        assert meta["config_indices"] == [0, 1, 0, 1]
        assert meta["crashed"] == [t.crashed for t in traces]

    @given(seed=st.integers(0, 2**16))
    @settings(max_examples=10, deadline=None)
    def test_rollout_speeds_nonnegative(self, seed):
        trace = simulate_interaction(REFERENCE, seed=seed)
        assert (trace.channels[:, :2] >= 0.0).all()
        assert (trace.channels[:, CH_TTC] > 0.0).all()
