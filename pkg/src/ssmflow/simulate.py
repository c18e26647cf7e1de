"""Synthetic two-vehicle interaction generator and brute-force crash oracle.

A follower approaches a leader on a straight lane.  The follower cruises
with small Gaussian acceleration noise until the perceived time to collision
drops below a trigger threshold; after a reaction delay it brakes with a
deceleration drawn once per rollout from a configurable range.  The leader
is stopped, drives at constant speed, or decelerates to a stop.

Rollouts double as the ground-truth oracle: the crash probability of a
scenario is the fraction of independent rollouts in which the gap closes to
zero before the horizon.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CH_TTC, CHANNELS, DEFAULT_TTC_CAP, DT, FORMAT_VERSION, compute_ttc
from .errors import ConfigError, DataError

LEADER_PROFILES = ("stopped", "constant", "decelerating")
ACCEL_LIMIT = 6.0


@dataclass(frozen=True)
class ScenarioConfig:
    """Parameters of one stochastic approach scenario."""

    initial_gap: float
    leader_speed: float
    follower_speed: float
    leader_profile: str = "stopped"
    trigger_ttc: float = 1.5
    brake_range: tuple[float, float] = (-6.0, -3.0)
    accel_noise_std: float = 0.3
    reaction_delay: int = 2
    horizon: int = 60
    dt: float = DT
    ttc_cap: float = DEFAULT_TTC_CAP
    leader_decel: float = -2.0

    def __post_init__(self) -> None:
        if self.initial_gap <= 0:
            raise ConfigError("initial_gap must be positive")
        if self.horizon < 20:
            raise ConfigError("horizon must be at least 20 steps")
        lo, hi = self.brake_range
        if not (-ACCEL_LIMIT <= lo <= hi <= 0):
            raise ConfigError("brake_range must lie within [-6, 0]")
        if self.leader_profile not in LEADER_PROFILES:
            raise ConfigError(f"leader_profile must be one of {LEADER_PROFILES}")
        if self.leader_speed < 0 or self.follower_speed < 0:
            raise ConfigError("speeds must be non-negative")
        if self.accel_noise_std < 0 or self.trigger_ttc < 0 or self.reaction_delay < 0:
            raise ConfigError("noise, trigger and delay must be non-negative")

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["brake_range"] = list(self.brake_range)
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "ScenarioConfig":
        payload = dict(payload)
        payload["brake_range"] = tuple(payload.get("brake_range", (-6.0, -3.0)))
        return cls(**payload)


@dataclass
class SimulationTrace:
    """One rollout: recorded channels while the gap stays open."""

    channels: np.ndarray
    gap: np.ndarray
    crashed: bool
    crash_step: int | None


@dataclass(frozen=True)
class OracleEstimate:
    """Binomial crash-probability estimate from brute-force rollouts."""

    crash_probability: float
    n_rollouts: int
    binomial_stderr: float


def simulate_interaction(config: ScenarioConfig, seed: int) -> SimulationTrace:
    """Roll out one scenario; deterministic given the seed.

    Channels are recorded for every step with a positive gap, at most
    ``config.horizon`` of them.  The recorded acceleration is the effective
    one (speed change per dt), so speeds integrate accelerations exactly.
    """
    rng = np.random.default_rng(seed)
    dt = config.dt
    v_f = float(config.follower_speed)
    v_l = 0.0 if config.leader_profile == "stopped" else float(config.leader_speed)
    gap = float(config.initial_gap)

    # One brake strength per rollout, drawn when the trigger first fires so
    # the rollout's random stream is identical until then.
    brake = None
    brake_start = None

    rows = []
    gaps = []
    crashed = False
    crash_step = None
    for t in range(config.horizon):
        ttc = compute_ttc(gap, v_f, v_l, cap=config.ttc_cap)

        if brake_start is None and ttc < config.trigger_ttc:
            lo, hi = config.brake_range
            brake = float(rng.uniform(lo, hi))
            brake_start = t + config.reaction_delay

        a_f_cmd = brake if (brake_start is not None and t >= brake_start) else 0.0
        if config.accel_noise_std > 0:
            a_f_cmd += float(rng.normal(0.0, config.accel_noise_std))
        a_f_cmd = float(np.clip(a_f_cmd, -ACCEL_LIMIT, ACCEL_LIMIT))

        if config.leader_profile == "decelerating" and v_l > 0:
            a_l_cmd = float(np.clip(config.leader_decel, -ACCEL_LIMIT, 0.0))
        else:
            a_l_cmd = 0.0

        v_f_next = max(v_f + a_f_cmd * dt, 0.0)
        v_l_next = max(v_l + a_l_cmd * dt, 0.0)
        a_f = (v_f_next - v_f) / dt
        a_l = (v_l_next - v_l) / dt

        rows.append((v_f, v_l, a_f, a_l, ttc))
        gaps.append(gap)

        gap = gap + (v_l - v_f) * dt
        v_f, v_l = v_f_next, v_l_next
        if gap <= 0:
            crashed = True
            crash_step = t + 1
            break

    return SimulationTrace(
        channels=np.array(rows, dtype=np.float64),
        gap=np.array(gaps, dtype=np.float64),
        crashed=crashed,
        crash_step=crash_step,
    )


def oracle_crash_probability(
    config: ScenarioConfig, n_rollouts: int, seed: int = 0
) -> OracleEstimate:
    """Brute-force crash probability: fraction of rollouts closing the gap."""
    if n_rollouts < 100:
        raise ValueError("oracle needs at least 100 rollouts")
    rollout_seeds = np.random.SeedSequence(seed).generate_state(n_rollouts)
    crashes = sum(simulate_interaction(config, seed=int(s)).crashed for s in rollout_seeds)
    p = crashes / n_rollouts
    stderr = float(np.sqrt(p * (1.0 - p) / n_rollouts))
    return OracleEstimate(crash_probability=p, n_rollouts=n_rollouts, binomial_stderr=stderr)


def default_suite() -> list[ScenarioConfig]:
    """A fixed scenario grid spanning near-certain crashes to benign cruising.

    Stopped-leader approaches with graded trigger thresholds produce the
    conflict regimes; constant and decelerating leaders with earlier
    triggers or no closing speed produce the normal regimes.
    """
    configs = []
    for v in (8.0, 10.0, 12.0):
        for trigger in (0.8, 1.2, 1.6, 2.2):
            configs.append(
                ScenarioConfig(
                    initial_gap=40.0,
                    leader_speed=0.0,
                    follower_speed=v,
                    leader_profile="stopped",
                    trigger_ttc=trigger,
                    brake_range=(-6.0, -3.0),
                    accel_noise_std=0.3,
                    reaction_delay=2,
                    horizon=80,
                )
            )
    for dv in (2.0, 4.0):
        for trigger in (1.5, 2.5):
            configs.append(
                ScenarioConfig(
                    initial_gap=25.0,
                    leader_speed=6.0,
                    follower_speed=6.0 + dv,
                    leader_profile="constant",
                    trigger_ttc=trigger,
                    brake_range=(-5.0, -2.0),
                    accel_noise_std=0.3,
                    reaction_delay=2,
                    horizon=80,
                )
            )
    for v in (8.0, 10.0):
        for trigger in (1.2, 2.0):
            configs.append(
                ScenarioConfig(
                    initial_gap=30.0,
                    leader_speed=v,
                    follower_speed=v,
                    leader_profile="decelerating",
                    trigger_ttc=trigger,
                    brake_range=(-6.0, -3.0),
                    accel_noise_std=0.3,
                    reaction_delay=2,
                    horizon=80,
                    leader_decel=-2.5,
                )
            )
    for v, gap in ((8.0, 60.0), (10.0, 80.0), (6.0, 50.0), (12.0, 90.0)):
        configs.append(
            ScenarioConfig(
                initial_gap=gap,
                leader_speed=v,
                follower_speed=v,
                leader_profile="constant",
                trigger_ttc=3.0,
                brake_range=(-4.0, -2.0),
                accel_noise_std=0.3,
                reaction_delay=1,
                horizon=80,
            )
        )
    return configs


def suite_windows(
    configs: Sequence[ScenarioConfig],
    rollouts_per_config: int,
    seed: int,
    stride: int = 5,
    length: int = 20,
) -> np.ndarray:
    """Windows pooled over rollouts of every config (raw physical units)."""
    from .data import window_stream

    parts = []
    rng = np.random.default_rng(seed)
    for config in configs:
        for _ in range(rollouts_per_config):
            trace = simulate_interaction(config, seed=int(rng.integers(2**31)))
            parts.append(window_stream(trace.channels, length=length, stride=stride))
    if not parts:
        return np.empty((0, length, len(CHANNELS)))
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# Stream persistence (binary array + JSON sidecar)
# ---------------------------------------------------------------------------


def critical_window(trace: SimulationTrace, length: int = 20) -> np.ndarray | None:
    """The window whose last step is the trace's minimum-TTC moment.

    Returns None when the recorded stream is shorter than the window.
    """
    n = trace.channels.shape[0]
    if n < length:
        return None
    end = int(np.clip(trace.channels[:, CH_TTC].argmin() + 1, length, n))
    return trace.channels[end - length : end]


def save_streams(
    directory,
    traces: Sequence[SimulationTrace],
    configs: Sequence[ScenarioConfig],
    config_indices: Sequence[int],
    seed: int,
) -> None:
    """Persist rollout streams as one concatenated array plus a sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(config_indices) != len(traces):
        raise ValueError("one config index per trace is required")
    lengths = [trace.channels.shape[0] for trace in traces]
    stacked = (
        np.concatenate([trace.channels for trace in traces], axis=0)
        if traces
        else np.empty((0, len(CHANNELS)))
    )
    np.save(directory / "streams.npy", stacked)
    sidecar = {
        "format_version": FORMAT_VERSION,
        "channels": list(CHANNELS),
        "dt": DT,
        "seed": seed,
        "lengths": lengths,
        "crashed": [bool(trace.crashed) for trace in traces],
        "crash_steps": [trace.crash_step for trace in traces],
        "config_indices": [int(i) for i in config_indices],
        "configs": [config.to_dict() for config in configs],
    }
    with open(directory / "streams.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_streams(directory) -> tuple[list[np.ndarray], dict]:
    """Load persisted rollout streams; inverse of :func:`save_streams`."""
    directory = Path(directory)
    sidecar_path = directory / "streams.json"
    if not sidecar_path.exists():
        raise DataError(f"missing streams sidecar {sidecar_path}")
    with open(sidecar_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported streams format_version {meta.get('format_version')}")
    stacked = np.load(directory / "streams.npy")
    streams = []
    offset = 0
    for length in meta["lengths"]:
        streams.append(stacked[offset : offset + length])
        offset += length
    if offset != stacked.shape[0]:
        raise DataError("streams sidecar lengths do not match the array file")
    return streams, meta
