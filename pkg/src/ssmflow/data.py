"""Interaction data model: kinematics, windowing, filtering, standardization.

A two-vehicle interaction is represented as a fixed-length window of five
channels sampled at 0.1 s:

    index 0  v_i   follower speed (m/s)
    index 1  v_j   leader speed (m/s)
    index 2  a_i   follower longitudinal acceleration (m/s^2)
    index 3  a_j   leader longitudinal acceleration (m/s^2)
    index 4  ttc   time to collision under constant speeds (s), capped

Windows are 20 steps long; the first 10 steps are the observed sequence and
the last 10 the prediction target.  Dataset-level operations work on stacked
arrays of shape ``[n_windows, 20, 5]``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

CHANNELS = ("v_i", "v_j", "a_i", "a_j", "ttc")
CH_VI, CH_VJ, CH_AI, CH_AJ, CH_TTC = range(5)
SPEED_CHANNELS = (CH_VI, CH_VJ)

DT = 0.1
SEQ_LEN = 20
OBSERVED_LEN = 10
TARGET_LEN = SEQ_LEN - OBSERVED_LEN
DEFAULT_TTC_CAP = 10.0

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrajectoryRecord:
    """One raw trajectory frame for one vehicle."""

    vehicle_id: str
    timestamp: float
    position_x: float
    position_y: float
    velocity_x: float
    velocity_y: float
    yaw: float

    @property
    def speed(self) -> float:
        return math.hypot(self.velocity_x, self.velocity_y)


@dataclass
class InteractionWindow:
    """A single 20-step x 5-channel interaction sequence."""

    channels: np.ndarray
    dt: float = DT
    observed_len: int = OBSERVED_LEN
    ttc_cap: float = DEFAULT_TTC_CAP

    def __post_init__(self) -> None:
        self.channels = np.asarray(self.channels, dtype=np.float64)
        validate_windows(self.channels[None], ttc_cap=self.ttc_cap)

    @property
    def observed(self) -> np.ndarray:
        return self.channels[: self.observed_len]

    @property
    def target(self) -> np.ndarray:
        return self.channels[self.observed_len :]


def validate_windows(windows: np.ndarray, ttc_cap: float = DEFAULT_TTC_CAP) -> np.ndarray:
    """Check window invariants on a stacked ``[n, 20, 5]`` array (raw units)."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[1] != SEQ_LEN or windows.shape[2] != len(CHANNELS):
        raise DataError(f"expected windows of shape [n, {SEQ_LEN}, {len(CHANNELS)}], got {windows.shape}")
    if not np.isfinite(windows).all():
        raise DataError("windows contain non-finite values")
    ttc = windows[:, :, CH_TTC]
    if (ttc <= 0).any() or (ttc > ttc_cap + 1e-9).any():
        raise DataError("ttc channel must lie in (0, ttc_cap]")
    if (windows[:, :, list(SPEED_CHANNELS)] < 0).any():
        raise DataError("speed channels must be non-negative")
    return windows


def compute_ttc(gap, v_follower, v_leader, cap: float = DEFAULT_TTC_CAP):
    """Time to collision under constant speeds, capped for non-closing pairs.

    Accepts scalars or broadcastable arrays.  ``gap`` must be positive and
    finite; a pair that is not closing (follower no faster than leader)
    receives the cap so downstream models always see finite values.
    """
    gap = np.asarray(gap, dtype=np.float64)
    v_follower = np.asarray(v_follower, dtype=np.float64)
    v_leader = np.asarray(v_leader, dtype=np.float64)
    if cap <= 0:
        raise ValueError("ttc cap must be positive")
    if not np.isfinite(gap).all() or (gap <= 0).any():
        raise ValueError("gap must be positive and finite")
    closing = v_follower - v_leader
    with np.errstate(divide="ignore", over="ignore"):
        raw = np.where(closing > 0, gap / np.where(closing > 0, closing, 1.0), np.inf)
    ttc = np.minimum(raw, cap)
    if ttc.ndim == 0:
        return float(ttc)
    return ttc


def differentiate_speed(speed: np.ndarray, dt: float = DT) -> np.ndarray:
    """Acceleration from a speed series: central differences, one-sided ends."""
    speed = np.asarray(speed, dtype=np.float64)
    if speed.ndim != 1 or speed.size < 3:
        raise ValueError("speed series must be 1-D with at least 3 samples")
    if dt <= 0:
        raise ValueError("dt must be positive")
    return np.gradient(speed, dt, edge_order=1)


def window_stream(stream: np.ndarray, length: int = SEQ_LEN, stride: int = 1) -> np.ndarray:
    """Slide a fixed-length window over one ``[steps, 5]`` channel stream.

    Returns ``[n, length, 5]`` with ``n = (steps - length) // stride + 1``;
    a stream shorter than ``length`` yields an empty result.
    """
    stream = np.asarray(stream, dtype=np.float64)
    if stream.ndim != 2 or stream.shape[1] != len(CHANNELS):
        raise DataError(f"expected stream of shape [steps, {len(CHANNELS)}], got {stream.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    steps = stream.shape[0]
    if steps < length:
        return np.empty((0, length, len(CHANNELS)))
    starts = range(0, steps - length + 1, stride)
    return np.stack([stream[s : s + length] for s in starts])


def window_interactions(
    streams: Iterable[np.ndarray], length: int = SEQ_LEN, stride: int = 1
) -> np.ndarray:
    """Window every stream of a collection and stack the results."""
    parts = [window_stream(s, length=length, stride=stride) for s in streams]
    if not parts:
        return np.empty((0, length, len(CHANNELS)))
    return np.concatenate(parts, axis=0)


def filter_min_ttc(windows: np.ndarray, threshold: float = 4.0) -> np.ndarray:
    """Keep windows whose minimum ttc over all steps is at most ``threshold``.

    Interactions that never get critical (high minimum TTC) are dropped so
    the retained set concentrates on windows with an actual approach phase.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.shape[0] == 0:
        return windows
    keep = windows[:, :, CH_TTC].min(axis=1) <= threshold
    return windows[keep]


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and standard deviation from the training split."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != (len(CHANNELS),) or self.std.shape != (len(CHANNELS),):
            raise ConfigError("channel stats must carry one mean/std per channel")
        if (self.std <= 0).any() or not np.isfinite(self.mean).all() or not np.isfinite(self.std).all():
            raise ConfigError("channel std must be positive and finite")

    @classmethod
    def from_windows(cls, windows: np.ndarray) -> "ChannelStats":
        windows = np.asarray(windows, dtype=np.float64)
        flat = windows.reshape(-1, windows.shape[-1])
        return cls(mean=flat.mean(axis=0), std=flat.std(axis=0))

    @classmethod
    def identity(cls) -> "ChannelStats":
        return cls(mean=np.zeros(len(CHANNELS)), std=np.ones(len(CHANNELS)))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "ChannelStats":
        return cls(mean=np.array(payload["mean"]), std=np.array(payload["std"]))

    def to_model_space(self, value, channel: int):
        """Convert a physical-unit value (or array) on one channel."""
        return (np.asarray(value, dtype=np.float64) - self.mean[channel]) / self.std[channel]

    def to_physical(self, value, channel: int):
        return np.asarray(value, dtype=np.float64) * self.std[channel] + self.mean[channel]


def standardize(windows: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Per-channel z-scoring into model space."""
    windows = np.asarray(windows, dtype=np.float64)
    return (windows - stats.mean) / stats.std


def destandardize(windows: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Inverse of :func:`standardize`."""
    windows = np.asarray(windows, dtype=np.float64)
    return windows * stats.std + stats.mean


@dataclass
class DatasetSplit:
    """Train / validation / test partition of a window set."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int = 0
    ratios: tuple = (0.8, 0.1, 0.1)

    def sizes(self) -> tuple[int, int, int]:
        return (len(self.train), len(self.validation), len(self.test))


def split_dataset(
    windows: np.ndarray, seed: int, ratios: Sequence[float] = (0.8, 0.1, 0.1)
) -> DatasetSplit:
    """Shuffle deterministically and partition into train/validation/test.

    Rounding rule: train and validation sizes are the floors of their
    targets; every leftover window goes to the test split.
    """
    windows = np.asarray(windows, dtype=np.float64)
    n = windows.shape[0]
    if n < 10:
        raise ValueError("need at least 10 windows to split")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("split ratios must be three values summing to 1")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(n * ratios[0]))
    n_val = int(math.floor(n * ratios[1]))
    idx_train = order[:n_train]
    idx_val = order[n_train : n_train + n_val]
    idx_test = order[n_train + n_val :]
    return DatasetSplit(
        train=windows[idx_train],
        validation=windows[idx_val],
        test=windows[idx_test],
        seed=seed,
        ratios=tuple(ratios),
    )


# ---------------------------------------------------------------------------
# Trajectory CSV input
# ---------------------------------------------------------------------------

TRAJECTORY_HEADER = ["vehicle_id", "timestamp", "x", "y", "vx", "vy", "yaw"]


def read_trajectory_csv(path) -> dict[str, list[TrajectoryRecord]]:
    """Read per-frame trajectory rows grouped by vehicle.

    The file must carry the header ``vehicle_id,timestamp,x,y,vx,vy,yaw``
    with one row per vehicle per 0.1 s frame; timestamps within one vehicle
    must strictly increase in 0.1 s steps.
    """
    records: dict[str, list[TrajectoryRecord]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRAJECTORY_HEADER:
            raise DataError(f"unexpected trajectory header {reader.fieldnames}")
        for row in reader:
            try:
                rec = TrajectoryRecord(
                    vehicle_id=row["vehicle_id"],
                    timestamp=float(row["timestamp"]),
                    position_x=float(row["x"]),
                    position_y=float(row["y"]),
                    velocity_x=float(row["vx"]),
                    velocity_y=float(row["vy"]),
                    yaw=float(row["yaw"]),
                )
            except (TypeError, ValueError) as exc:
                raise DataError(f"malformed trajectory row {row}") from exc
            if not all(
                np.isfinite([rec.timestamp, rec.velocity_x, rec.velocity_y])
            ):
                raise DataError(f"non-finite trajectory values for vehicle {rec.vehicle_id}")
            records.setdefault(rec.vehicle_id, []).append(rec)
    for vid, recs in records.items():
        times = np.array([r.timestamp for r in recs])
        if len(times) > 1 and not np.allclose(np.diff(times), DT, atol=1e-6):
            raise DataError(f"vehicle {vid} timestamps must increase in {DT} s steps")
    return records


def pair_channel_stream(
    follower: Sequence[TrajectoryRecord],
    leader: Sequence[TrajectoryRecord],
    ttc_cap: float = DEFAULT_TTC_CAP,
    dt: float = DT,
) -> np.ndarray:
    """Build a ``[steps, 5]`` channel stream for a follower/leader pair.

    Uses the collision-course closing-speed model: gap is the straight-line
    distance between positions, closing speed the difference of the speed
    magnitudes.
    """
    n = min(len(follower), len(leader))
    if n < 3:
        raise DataError("need at least 3 aligned frames to build a stream")
    v_i = np.array([r.speed for r in follower[:n]])
    v_j = np.array([r.speed for r in leader[:n]])
    gap = np.array(
        [
            math.hypot(
                leader[t].position_x - follower[t].position_x,
                leader[t].position_y - follower[t].position_y,
            )
            for t in range(n)
        ]
    )
    a_i = differentiate_speed(v_i, dt)
    a_j = differentiate_speed(v_j, dt)
    ttc = compute_ttc(gap, v_i, v_j, cap=ttc_cap)
    return np.stack([v_i, v_j, a_i, a_j, ttc], axis=1)


# ---------------------------------------------------------------------------
# Dataset persistence: binary arrays + JSON sidecar
# ---------------------------------------------------------------------------


def save_split(
    directory,
    split: DatasetSplit,
    stats: ChannelStats,
    ttc_cap: float = DEFAULT_TTC_CAP,
    filter_threshold: float | None = None,
    extra: dict | None = None,
) -> None:
    """Persist a split as train/validation/test ``.npy`` plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in (("train", split.train), ("validation", split.validation), ("test", split.test)):
        np.save(directory / f"{name}.npy", np.asarray(arr, dtype=np.float64))
    sidecar = {
        "format_version": FORMAT_VERSION,
        "channels": list(CHANNELS),
        "dt": DT,
        "observed_len": OBSERVED_LEN,
        "ttc_cap": ttc_cap,
        "filter_threshold": filter_threshold,
        "seed": split.seed,
        "ratios": list(split.ratios),
        "sizes": list(split.sizes()),
        "stats": stats.to_dict(),
    }
    if extra:
        sidecar.update(extra)
    with open(directory / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_split(directory) -> tuple[DatasetSplit, ChannelStats, dict]:
    """Load a persisted split; inverse of :func:`save_split`."""
    directory = Path(directory)
    sidecar_path = directory / "dataset.json"
    if not sidecar_path.exists():
        raise DataError(f"missing dataset sidecar {sidecar_path}")
    with open(sidecar_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format_version {meta.get('format_version')}")
    if meta.get("channels") != list(CHANNELS):
        raise DataError("dataset channel order does not match this build")
    arrays = {}
    for name in ("train", "validation", "test"):
        path = directory / f"{name}.npy"
        if not path.exists():
            raise DataError(f"missing dataset file {path}")
        arrays[name] = np.load(path)
    split = DatasetSplit(
        train=arrays["train"],
        validation=arrays["validation"],
        test=arrays["test"],
        seed=int(meta.get("seed", 0)),
        ratios=tuple(meta.get("ratios", (0.8, 0.1, 0.1))),
    )
    stats = ChannelStats.from_dict(meta["stats"])
    return split, stats, meta
