"""Monte Carlo probability queries against a trained density model.

For one window and one future step the engine evaluates, over user-chosen
speed and acceleration boxes,

    action probability      P(x in X | u in U)
    crash probability       P(y <= 0, x in X, u in U)
    conditional crash       P(y <= 0 | x in X, u in U)

Integrals use uniform proposals over the box; the half-infinite TTC axis is
mapped to [0, 1) via y = c - s/(1-s) with Jacobian 1/(1-s)^2.  Ratios carry
delta-method standard errors from independently seeded numerator and
denominator estimates.  Queries are phrased in physical units and converted
through the checkpoint's channel statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .data import CH_TTC, CHANNELS, OBSERVED_LEN, ChannelStats, standardize
from .errors import ConfigError, UnstableDenominatorError
from .model import DTYPE

Interval = tuple[float, float]

ACCEL_SUPPORT = (-6.0, 6.0)
X_ALL: tuple[Interval, Interval] = (ACCEL_SUPPORT, ACCEL_SUPPORT)

# Channel indices of the condition (u), action (x) and outcome (y) blocks.
U_CHANNELS = (0, 1)
X_CHANNELS = (2, 3)
Y_CHANNEL = 4


@dataclass(frozen=True)
class ActionTaxonomy:
    """Named follower-acceleration bands; the leader may do anything."""

    actions: tuple[tuple[str, Interval], ...] = (
        ("evasive", (-6.0, -3.0)),
        ("large_deceleration", (-3.0, -2.0)),
        ("small_deceleration", (-2.0, -0.5)),
        ("no_action", (-0.5, 0.5)),
        ("acceleration", (0.5, 6.0)),
    )
    a_j: Interval = ACCEL_SUPPORT

    def __post_init__(self) -> None:
        ordered = sorted(interval for _, interval in self.actions)
        if ordered[0][0] != ACCEL_SUPPORT[0] or ordered[-1][1] != ACCEL_SUPPORT[1]:
            raise ConfigError("action intervals must tile the acceleration support")
        for (_, hi), (lo, _) in zip(ordered[:-1], ordered[1:]):
            if hi != lo:
                raise ConfigError("action intervals must share endpoints")

    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.actions)

    def x_intervals(self, name: str) -> tuple[Interval, Interval]:
        for action, interval in self.actions:
            if action == name:
                return (interval, self.a_j)
        raise KeyError(f"unknown action {name!r}")


DEFAULT_TAXONOMY = ActionTaxonomy()


@dataclass(frozen=True)
class EventBox:
    """Integration region over (u, x, y); omitted blocks are not integrated.

    Only the y interval may be unbounded, and only below.
    """

    u: tuple[Interval, Interval]
    x: tuple[Interval, Interval] | None = None
    y: Interval | None = None

    def __post_init__(self) -> None:
        for interval in self._finite_intervals():
            lo, hi = interval
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ConfigError(f"invalid interval {interval}")
        if self.y is not None:
            lo, hi = self.y
            if not np.isfinite(hi) or (np.isfinite(lo) and lo > hi):
                raise ConfigError(f"invalid outcome interval {self.y}")

    def _finite_intervals(self):
        intervals = list(self.u)
        if self.x is not None:
            intervals.extend(self.x)
        return intervals

    def dim_intervals(self) -> list[tuple[int, Interval]]:
        pairs = [(U_CHANNELS[0], self.u[0]), (U_CHANNELS[1], self.u[1])]
        if self.x is not None:
            pairs += [(X_CHANNELS[0], self.x[0]), (X_CHANNELS[1], self.x[1])]
        if self.y is not None:
            pairs.append((Y_CHANNEL, self.y))
        return pairs

    def standardized(self, stats: ChannelStats) -> "EventBox":
        """Convert physical-unit bounds into model space."""

        def conv(interval: Interval, channel: int) -> Interval:
            lo, hi = interval
            new_lo = -math.inf if lo == -math.inf else float(stats.to_model_space(lo, channel))
            return (new_lo, float(stats.to_model_space(hi, channel)))

        return EventBox(
            u=(conv(self.u[0], U_CHANNELS[0]), conv(self.u[1], U_CHANNELS[1])),
            x=None if self.x is None else (conv(self.x[0], X_CHANNELS[0]), conv(self.x[1], X_CHANNELS[1])),
            y=None if self.y is None else conv(self.y, Y_CHANNEL),
        )


@dataclass(frozen=True)
class ProbabilityEstimate:
    """Monte Carlo value with its standard error and sample count."""

    value: float
    stderr: float
    n_samples: int

    @staticmethod
    def ratio(numerator: "ProbabilityEstimate", denominator: "ProbabilityEstimate") -> "ProbabilityEstimate":
        """Delta-method ratio of two independent estimates."""
        if denominator.value < 5.0 * denominator.stderr or denominator.value <= 0.0:
            raise UnstableDenominatorError(
                f"denominator {denominator.value:.3e} is within 5 stderr ({denominator.stderr:.3e}) of zero"
            )
        value = numerator.value / denominator.value
        rel_num = numerator.stderr / numerator.value if numerator.value != 0 else 0.0
        rel_den = denominator.stderr / denominator.value
        stderr = abs(value) * math.sqrt(rel_num**2 + rel_den**2) if numerator.value != 0 else (
            numerator.stderr / denominator.value
        )
        return ProbabilityEstimate(value=value, stderr=stderr, n_samples=numerator.n_samples)

    def minus(self, other: "ProbabilityEstimate") -> "ProbabilityEstimate":
        return ProbabilityEstimate(
            value=self.value - other.value,
            stderr=math.sqrt(self.stderr**2 + other.stderr**2),
            n_samples=min(self.n_samples, other.n_samples),
        )


def mc_integrate(
    log_density: Callable[[np.ndarray], np.ndarray],
    box: EventBox,
    n: int = 10_000,
    seed: int = 0,
) -> ProbabilityEstimate:
    """Uniform-proposal Monte Carlo integral of ``exp(log_density)`` over a box.

    ``log_density`` receives model-space points ``[n, 5]`` (inactive dims
    zero) and must return per-point log densities of exactly the factors
    being integrated.  A zero-width interval yields an exact 0.
    """
    rng = np.random.default_rng(seed)
    points = np.zeros((n, len(CHANNELS)))
    log_weight = np.zeros(n)
    volume = 1.0
    for dim, (lo, hi) in box.dim_intervals():
        if lo == -math.inf:
            s = rng.uniform(0.0, 1.0, size=n)
            points[:, dim] = hi - s / (1.0 - s)
            log_weight += -2.0 * np.log1p(-s)
        else:
            width = hi - lo
            if width == 0.0:
                return ProbabilityEstimate(value=0.0, stderr=0.0, n_samples=n)
            volume *= width
            points[:, dim] = rng.uniform(lo, hi, size=n)
    integrand = np.exp(log_density(points) + log_weight)
    value = volume * float(integrand.mean())
    stderr = volume * float(integrand.std(ddof=1)) / math.sqrt(n)
    return ProbabilityEstimate(value=value, stderr=stderr, n_samples=n)


# Stable per-method seed tags so repeated queries reproduce exactly.
_SEED_TAGS = {"action": 1, "joint": 2, "crash": 3, "conditional": 4}


class ProbabilityEngine:
    """Query engine for one window: rollouts and contexts computed once.

    The per-step context is taken from the median predicted trajectory of
    ``n_rollouts`` autoregressive samples; the same samples provide the
    per-step percentile bands for the condition block.
    """

    def __init__(
        self,
        ckpt,
        window: np.ndarray,
        n_rollouts: int = 1000,
        seed: int = 0,
        n_mc: int = 10_000,
        band_source: str = "context",
        dataset_windows: np.ndarray | None = None,
        forced_steps: dict | None = None,
        max_attempts: int = 10_000,
    ):
        if band_source not in ("context", "dataset"):
            raise ConfigError("band_source must be 'context' or 'dataset'")
        if band_source == "dataset" and dataset_windows is None:
            raise ConfigError("dataset band_source needs dataset_windows")
        self.ckpt = ckpt
        self.stats = ckpt.stats
        self.model = ckpt.model
        self.model.eval()
        self.seed = seed
        self.n_mc = n_mc
        self.band_source = band_source
        self.dataset_windows = dataset_windows
        if hasattr(window, "channels"):
            window = window.channels
        window = np.asarray(window, dtype=np.float64)
        self.window = window
        window_std = standardize(window, self.stats)
        self.observed_std = window_std[:OBSERVED_LEN]
        generator = torch.Generator().manual_seed(seed)
        self.samples_std = (
            self.model.rollout(
                self.observed_std,
                n_rollouts,
                generator=generator,
                forced_steps=forced_steps,
                max_attempts=max_attempts,
            )
            .cpu()
            .numpy()
        )
        self.median_std = np.median(self.samples_std, axis=0)
        self.contexts = self.model.teacher_forced_contexts(self.observed_std, self.median_std)

    # -- conditioning helpers ------------------------------------------------

    def percentile_band(self, t: int, band: tuple[float, float] = (25.0, 75.0)) -> tuple[Interval, Interval]:
        """Physical-unit condition band at step t (per speed dimension)."""
        self._check_step(t)
        lo_q, hi_q = band
        intervals = []
        for dim in U_CHANNELS:
            if self.band_source == "context":
                values_std = self.samples_std[:, t - 1, dim]
                values = self.stats.to_physical(values_std, dim)
            else:
                values = self.dataset_windows[:, :, dim].ravel()
            lo, hi = np.percentile(values, [lo_q, hi_q])
            intervals.append((float(lo), float(hi)))
        return tuple(intervals)

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.median_std.shape[0]:
            raise ValueError(f"target step must be in 1..{self.median_std.shape[0]}")

    def _resolve_u(self, t: int, u_intervals, band) -> tuple[Interval, Interval]:
        return tuple(u_intervals) if u_intervals is not None else self.percentile_band(t, band)

    def _query_seed(self, t: int, tag: str, seed: int | None) -> np.random.SeedSequence:
        if seed is not None:
            return np.random.SeedSequence(seed)
        return np.random.SeedSequence((self.seed, t, _SEED_TAGS[tag]))

    def _log_density(self, t: int, parts: Sequence[str]) -> Callable[[np.ndarray], np.ndarray]:
        context = self.contexts[t - 1]

        def fn(points: np.ndarray) -> np.ndarray:
            a = torch.as_tensor(points, dtype=DTYPE)
            k = context.unsqueeze(0).expand(a.shape[0], -1)
            with torch.no_grad():
                lp_u, lp_x, lp_y = self.model.flow.grouped_log_prob(a, k)
            total = torch.zeros_like(lp_u)
            if "u" in parts:
                total = total + lp_u
            if "x" in parts:
                total = total + lp_x
            if "y" in parts:
                total = total + lp_y
            return total.cpu().numpy()

        return fn

    def _integrate(self, t: int, box: EventBox, parts, n: int, seed, space: str) -> ProbabilityEstimate:
        if space == "physical":
            box = box.standardized(self.stats)
        elif space != "model":
            raise ConfigError("space must be 'physical' or 'model'")
        return mc_integrate(self._log_density(t, parts), box, n=n, seed=seed)

    # -- public queries (physical units by default) ---------------------------

    def action_probability(
        self,
        t: int,
        x_intervals: tuple[Interval, Interval],
        u_intervals=None,
        band: tuple[float, float] = (25.0, 75.0),
        n: int | None = None,
        seed: int | None = None,
        space: str = "physical",
    ) -> ProbabilityEstimate:
        """P(x in X | u in U) at step t."""
        self._check_step(t)
        n = n or self.n_mc
        u = self._resolve_u(t, u_intervals, band)
        num_seed, den_seed = self._query_seed(t, "action", seed).spawn(2)
        numerator = self._integrate(
            t, EventBox(u=u, x=tuple(x_intervals)), ("u", "x"), n, _seed_int(num_seed), space
        )
        denominator = self._integrate(t, EventBox(u=u), ("u",), n, _seed_int(den_seed), space)
        return ProbabilityEstimate.ratio(numerator, denominator)

    def joint_action_probability(
        self,
        t: int,
        x_intervals: tuple[Interval, Interval],
        u_intervals=None,
        band: tuple[float, float] = (25.0, 75.0),
        n: int | None = None,
        seed: int | None = None,
        space: str = "physical",
    ) -> ProbabilityEstimate:
        """P(x in X, u in U) at step t."""
        self._check_step(t)
        n = n or self.n_mc
        u = self._resolve_u(t, u_intervals, band)
        (only_seed,) = self._query_seed(t, "joint", seed).spawn(1)
        return self._integrate(
            t, EventBox(u=u, x=tuple(x_intervals)), ("u", "x"), n, _seed_int(only_seed), space
        )

    def crash_probability(
        self,
        t: int,
        band: tuple[float, float] = (25.0, 75.0),
        x_intervals: tuple[Interval, Interval] = X_ALL,
        y_upper: float = 0.0,
        u_intervals=None,
        n: int | None = None,
        seed: int | None = None,
        space: str = "physical",
    ) -> ProbabilityEstimate:
        """P(y <= y_upper, x in X, u in U) at step t (y_upper physical)."""
        self._check_step(t)
        n = n or self.n_mc
        u = self._resolve_u(t, u_intervals, band)
        (only_seed,) = self._query_seed(t, "crash", seed).spawn(1)
        box = EventBox(u=u, x=tuple(x_intervals), y=(-math.inf, y_upper))
        return self._integrate(t, box, ("u", "x", "y"), n, _seed_int(only_seed), space)

    def conditional_crash_probability(
        self,
        t: int,
        x_intervals: tuple[Interval, Interval],
        u_intervals=None,
        band: tuple[float, float] = (25.0, 75.0),
        y_upper: float = 0.0,
        n: int | None = None,
        seed: int | None = None,
        space: str = "physical",
    ) -> ProbabilityEstimate:
        """P(y <= y_upper | x in X, u in U) at step t."""
        self._check_step(t)
        n = n or self.n_mc
        u = self._resolve_u(t, u_intervals, band)
        num_seed, den_seed = self._query_seed(t, "conditional", seed).spawn(2)
        numerator = self._integrate(
            t,
            EventBox(u=u, x=tuple(x_intervals), y=(-math.inf, y_upper)),
            ("u", "x", "y"),
            n,
            _seed_int(num_seed),
            space,
        )
        denominator = self._integrate(
            t, EventBox(u=u, x=tuple(x_intervals)), ("u", "x"), n, _seed_int(den_seed), space
        )
        return ProbabilityEstimate.ratio(numerator, denominator)


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


# ---------------------------------------------------------------------------
# Spec-level one-shot wrappers
# ---------------------------------------------------------------------------


def conditional_action_probability(
    ckpt, window, t: int, x_intervals, u_intervals, n: int = 10_000, seed: int = 0
) -> ProbabilityEstimate:
    engine = ProbabilityEngine(ckpt, window, seed=seed, n_mc=n)
    return engine.action_probability(t, x_intervals, u_intervals=u_intervals)


def crash_probability(
    ckpt, window, t: int, percentile_band: tuple[float, float] = (25.0, 75.0), n: int = 10_000, seed: int = 0
) -> ProbabilityEstimate:
    engine = ProbabilityEngine(ckpt, window, seed=seed, n_mc=n)
    return engine.crash_probability(t, band=percentile_band)


def conditional_crash_probability(
    ckpt, window, t: int, x_intervals, u_intervals=None, n: int = 10_000, seed: int = 0
) -> ProbabilityEstimate:
    engine = ProbabilityEngine(ckpt, window, seed=seed, n_mc=n)
    return engine.conditional_crash_probability(t, x_intervals, u_intervals=u_intervals)


# ---------------------------------------------------------------------------
# Per-step tables (values plus aligned standard errors)
# ---------------------------------------------------------------------------


def action_probability_table(
    engine: ProbabilityEngine, taxonomy: ActionTaxonomy = DEFAULT_TAXONOMY, band=(25.0, 75.0)
) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Rows: one per action plus a Sum row; columns: the 10 future steps."""
    n_steps = engine.median_std.shape[0]
    names = list(taxonomy.names())
    values = np.zeros((len(names) + 1, n_steps))
    errors = np.zeros_like(values)
    for col, t in enumerate(range(1, n_steps + 1)):
        u = engine.percentile_band(t, band)
        for row, name in enumerate(names):
            est = engine.action_probability(t, taxonomy.x_intervals(name), u_intervals=u)
            values[row, col] = est.value
            errors[row, col] = est.stderr
        values[-1, col] = values[:-1, col].sum()
        errors[-1, col] = math.sqrt(float((errors[:-1, col] ** 2).sum()))
    return names + ["sum"], values, errors


def probability_quartet_table(
    engine: ProbabilityEngine,
    x_intervals: tuple[Interval, Interval],
    band=(25.0, 75.0),
    y_upper: float = 0.0,
) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Rows P(X|U), P(Y,X,U), P(X,U), P(Y|X,U); columns the future steps."""
    n_steps = engine.median_std.shape[0]
    labels = ["P(X|U)", "P(Y,X,U)", "P(X,U)", "P(Y|X,U)"]
    values = np.zeros((4, n_steps))
    errors = np.zeros_like(values)
    for col, t in enumerate(range(1, n_steps + 1)):
        u = engine.percentile_band(t, band)
        quartet = [
            engine.action_probability(t, x_intervals, u_intervals=u),
            engine.crash_probability(t, x_intervals=x_intervals, u_intervals=u, y_upper=y_upper),
            engine.joint_action_probability(t, x_intervals, u_intervals=u),
            engine.conditional_crash_probability(t, x_intervals, u_intervals=u, y_upper=y_upper),
        ]
        for row, est in enumerate(quartet):
            values[row, col] = est.value
            errors[row, col] = est.stderr
    return labels, values, errors
