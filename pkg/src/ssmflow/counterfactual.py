"""Forced-action rollouts and evasive-action effectiveness.

A counterfactual rollout substitutes the follower's acceleration at chosen
target steps, either with a fixed value or with a draw truncated to an
interval of the learned conditional; everything else keeps sampling from
the model, and the substituted values feed the decoder as realized history.

Effectiveness compares conditional crash probabilities under the no-action
and evasive bands at each step: E_t = P(crash | no action) - P(crash |
evasive).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import CH_AI, CH_TTC, OBSERVED_LEN, destandardize, standardize
from .errors import ConfigError
from .flow import ForcedDimension
from .probability import ACCEL_SUPPORT, DEFAULT_TAXONOMY, ProbabilityEngine, ProbabilityEstimate

# Interactions at or below this minimum TTC count as traffic conflicts.
CONFLICT_TTC_THRESHOLD = 1.5


def classify_context(window: np.ndarray) -> str:
    window = np.asarray(window, dtype=np.float64)
    min_ttc = window[:, CH_TTC].min()
    return "traffic_conflict" if min_ttc <= CONFLICT_TTC_THRESHOLD else "normal_interaction"


@dataclass(frozen=True)
class CounterfactualSpec:
    """Intervention on the follower acceleration at selected target steps.

    ``interval`` or ``value`` is in physical m/s^2; exactly one must be
    given.  Steps default to the whole prediction range.
    """

    interval: tuple[float, float] | None = None
    value: float | None = None
    steps: tuple[int, ...] = tuple(range(1, 11))
    dim: int = CH_AI

    def __post_init__(self) -> None:
        if (self.interval is None) == (self.value is None):
            raise ConfigError("specify exactly one of interval or value")
        if self.interval is not None:
            lo, hi = self.interval
            if lo > hi or lo < ACCEL_SUPPORT[0] or hi > ACCEL_SUPPORT[1]:
                raise ConfigError(f"interval must be ordered and within {ACCEL_SUPPORT}")
        if not self.steps or min(self.steps) < 1 or max(self.steps) > 10:
            raise ConfigError("steps must be a non-empty subset of 1..10")


@dataclass
class ForcedRollout:
    """Sampled predictions under an intervention, in both spaces."""

    samples_std: np.ndarray
    stats: object
    spec: CounterfactualSpec

    @property
    def samples(self) -> np.ndarray:
        return destandardize(self.samples_std, self.stats)

    @property
    def median(self) -> np.ndarray:
        return destandardize(np.median(self.samples_std, axis=0), self.stats)


def spec_forced_steps(spec: CounterfactualSpec, stats) -> dict[int, ForcedDimension]:
    """Per-step sampling constraints in model space."""
    if spec.value is not None:
        constraint = ForcedDimension(dim=spec.dim, value=float(stats.to_model_space(spec.value, spec.dim)))
    else:
        lo, hi = spec.interval
        constraint = ForcedDimension(
            dim=spec.dim,
            interval=(
                float(stats.to_model_space(lo, spec.dim)),
                float(stats.to_model_space(hi, spec.dim)),
            ),
        )
    return {t: constraint for t in spec.steps}


def forced_rollout(
    ckpt,
    window: np.ndarray,
    spec: CounterfactualSpec,
    n_samples: int = 1000,
    seed: int = 0,
    max_attempts: int = 10_000,
) -> ForcedRollout:
    """Sample target trajectories with the intervention applied."""
    if hasattr(window, "channels"):
        window = window.channels
    window = np.asarray(window, dtype=np.float64)
    stats = ckpt.stats
    observed_std = standardize(window, stats)[:OBSERVED_LEN]
    generator = torch.Generator().manual_seed(seed)
    samples = (
        ckpt.model.rollout(
            observed_std,
            n_samples,
            generator=generator,
            forced_steps=spec_forced_steps(spec, stats),
            max_attempts=max_attempts,
        )
        .cpu()
        .numpy()
    )
    return ForcedRollout(samples_std=samples, stats=stats, spec=spec)


@dataclass
class EffectivenessSeries:
    """Per-step evasive-action effectiveness with propagated uncertainty."""

    effect: np.ndarray
    stderr: np.ndarray
    p_crash_no_action: np.ndarray
    p_crash_evasive: np.ndarray
    context_label: str

    def mean_effect(self) -> tuple[float, float]:
        """Mean over steps and the stderr of that mean."""
        n = len(self.effect)
        return float(self.effect.mean()), float(np.sqrt((self.stderr**2).sum()) / n)


def effectiveness(
    ckpt,
    window: np.ndarray,
    u_intervals=None,
    taxonomy=DEFAULT_TAXONOMY,
    band: tuple[float, float] = (25.0, 75.0),
    n_rollouts: int = 1000,
    n_mc: int = 10_000,
    seed: int = 0,
    mode: str = "counterfactual_worlds",
    max_attempts: int = 10_000,
) -> EffectivenessSeries:
    """E_t = P(crash | no action) - P(crash | evasive) over the 10 steps.

    In the default mode each term is evaluated in its own counterfactual
    world: the no-action term along a rollout forced into the no-action
    band, the evasive term along a rollout forced into the evasive band,
    so the contexts reflect the sustained intervention.  ``shared_context``
    evaluates both terms on the unforced rollout instead, which measures
    the within-step association rather than the intervention effect.
    """
    if mode not in ("counterfactual_worlds", "shared_context"):
        raise ConfigError("mode must be 'counterfactual_worlds' or 'shared_context'")
    if hasattr(window, "channels"):
        window = window.channels
    window = np.asarray(window, dtype=np.float64)
    x_no = taxonomy.x_intervals("no_action")
    x_eva = taxonomy.x_intervals("evasive")
    if mode == "shared_context":
        engine_no = engine_eva = ProbabilityEngine(
            ckpt, window, n_rollouts=n_rollouts, seed=seed, n_mc=n_mc
        )
    else:
        spec_no = CounterfactualSpec(interval=x_no[0])
        spec_eva = CounterfactualSpec(interval=x_eva[0])
        engine_no = ProbabilityEngine(
            ckpt,
            window,
            n_rollouts=n_rollouts,
            seed=seed,
            n_mc=n_mc,
            forced_steps=spec_forced_steps(spec_no, ckpt.stats),
            max_attempts=max_attempts,
        )
        engine_eva = ProbabilityEngine(
            ckpt,
            window,
            n_rollouts=n_rollouts,
            seed=seed + 1,
            n_mc=n_mc,
            forced_steps=spec_forced_steps(spec_eva, ckpt.stats),
            max_attempts=max_attempts,
        )
    n_steps = engine_no.median_std.shape[0]
    effect = np.zeros(n_steps)
    stderr = np.zeros(n_steps)
    p_no = np.zeros(n_steps)
    p_eva = np.zeros(n_steps)
    for t in range(1, n_steps + 1):
        seed_no, seed_eva = np.random.SeedSequence((seed, t, 101)).spawn(2)
        u_no = engine_no.percentile_band(t, band) if u_intervals is None else tuple(u_intervals)
        u_eva = engine_eva.percentile_band(t, band) if u_intervals is None else tuple(u_intervals)
        est_no = engine_no.conditional_crash_probability(
            t, x_no, u_intervals=u_no, seed=int(seed_no.generate_state(1)[0])
        )
        est_eva = engine_eva.conditional_crash_probability(
            t, x_eva, u_intervals=u_eva, seed=int(seed_eva.generate_state(1)[0])
        )
        diff: ProbabilityEstimate = est_no.minus(est_eva)
        effect[t - 1] = diff.value
        stderr[t - 1] = diff.stderr
        p_no[t - 1] = est_no.value
        p_eva[t - 1] = est_eva.value
    return EffectivenessSeries(
        effect=effect,
        stderr=stderr,
        p_crash_no_action=p_no,
        p_crash_evasive=p_eva,
        context_label=classify_context(window),
    )
