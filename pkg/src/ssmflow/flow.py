"""Masked autoregressive flow over (v_i, v_j, a_i, a_j, ttc) given a context.

Dimension groups carry degrees 1/2/3 in the order speeds -> accelerations ->
ttc, so the learned joint factorizes as p(u|k) p(x|u,k) p(y|x,u,k).  The
context vector feeds every neuron through unmasked connections.

Conventions fixed here: the data-to-latent map per layer is
``z_d = (a_d - shift_d) * exp(log_scale_d)`` and each dimension contributes
``log phi(z_d) + sum_layers log_scale_d`` to the log-density.  Stacked
layers keep the same dimension order (no permutation) so the grouped
conditionals stay exact across the composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InfeasibleConstraintError, NumericFault

N_DIMS = 5
INPUT_DEGREES = (1, 1, 2, 2, 3)
MAX_HIDDEN_DEGREE = 2
U_DIMS = (0, 1)
X_DIMS = (2, 3)
Y_DIMS = (4,)
GROUPS = (U_DIMS, X_DIMS, Y_DIMS)

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FlowConfig:
    """Stack of masked affine layers sharing the causal dimension order."""

    n_layers: int = 2
    hidden_sizes: tuple[int, ...] = (64, 64)
    context_dim: int = 40
    log_scale_clamp: float = 7.0
    non_autoregressive: bool = False
    mask_seed: int = 0

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ConfigError("flow needs at least one layer")
        if self.log_scale_clamp <= 0:
            raise ConfigError("log_scale_clamp must be positive")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["hidden_sizes"] = list(self.hidden_sizes)
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "FlowConfig":
        payload = dict(payload)
        payload["hidden_sizes"] = tuple(payload.get("hidden_sizes", (64, 64)))
        return cls(**payload)


@dataclass
class MadeMasks:
    """Binary connectivity masks enforcing the u -> x -> y dependency order.

    ``mask_a`` maps inputs to the first hidden layer, ``hidden`` between
    consecutive hidden layers, ``mask_b`` from the last hidden layer to one
    output block.  All stored as ``[fan_in, fan_out]``.
    """

    mask_a: np.ndarray
    hidden: list[np.ndarray]
    mask_b: np.ndarray
    hidden_degrees: list[np.ndarray]


def build_masks(
    hidden_sizes, seed: int = 0, non_autoregressive: bool = False
) -> MadeMasks:
    """Assign hidden degrees and derive the connectivity masks.

    An input feeds a hidden unit iff the unit's degree is at least the
    input's; a hidden unit feeds an output iff the output's degree exceeds
    the unit's.  The non-autoregressive ablation removes every input-hidden
    connection and fully connects hidden to output.
    """
    hidden_sizes = tuple(int(h) for h in hidden_sizes)
    if not hidden_sizes:
        raise ConfigError("need at least one hidden layer")
    if min(hidden_sizes) < MAX_HIDDEN_DEGREE:
        raise ConfigError("hidden layer too small to host both degrees")
    rng = np.random.default_rng(seed)
    degrees = []
    for h in hidden_sizes:
        d = rng.integers(1, MAX_HIDDEN_DEGREE + 1, size=h)
        d[0], d[1] = 1, 2
        degrees.append(d)

    in_deg = np.asarray(INPUT_DEGREES)
    if non_autoregressive:
        mask_a = np.zeros((N_DIMS, hidden_sizes[0]))
        hidden = [np.ones((hidden_sizes[i], hidden_sizes[i + 1])) for i in range(len(hidden_sizes) - 1)]
        mask_b = np.ones((hidden_sizes[-1], N_DIMS))
    else:
        mask_a = (degrees[0][None, :] >= in_deg[:, None]).astype(np.float64)
        hidden = [
            (degrees[i + 1][None, :] >= degrees[i][:, None]).astype(np.float64)
            for i in range(len(hidden_sizes) - 1)
        ]
        mask_b = (in_deg[None, :] > degrees[-1][:, None]).astype(np.float64)
    return MadeMasks(mask_a=mask_a, hidden=hidden, mask_b=mask_b, hidden_degrees=degrees)


def path_counts(masks: MadeMasks) -> np.ndarray:
    """Number of network paths from each input dim to each output dim."""
    counts = masks.mask_a
    for m in masks.hidden:
        counts = counts @ m
    return counts @ masks.mask_b


class MaskedLinear(nn.Linear):
    """Linear layer whose weight is elementwise-gated by a fixed mask."""

    def __init__(self, mask: np.ndarray, bias: bool = True):
        in_features, out_features = mask.shape
        super().__init__(in_features, out_features, bias=bias)
        self.register_buffer("mask", torch.as_tensor(mask.T.copy(), dtype=torch.get_default_dtype()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight * self.mask, self.bias)


class ConditionalMade(nn.Module):
    """Masked network emitting per-dimension shift and log-scale.

    The context enters unmasked both at the first hidden layer and directly
    at the outputs, so even the degree-1 outputs (whose masked fan-in is
    empty) see the full context.
    """

    def __init__(self, masks: MadeMasks, context_dim: int, log_scale_clamp: float):
        super().__init__()
        self.log_scale_clamp = log_scale_clamp
        self.input_linear = MaskedLinear(masks.mask_a)
        self.context_in = nn.Linear(context_dim, masks.mask_a.shape[1], bias=False)
        self.hidden_linears = nn.ModuleList(MaskedLinear(m) for m in masks.hidden)
        # One mask column block per output head (shift, log-scale).
        self.output_linear = MaskedLinear(np.tile(masks.mask_b, (1, 2)))
        self.context_out = nn.Linear(context_dim, 2 * N_DIMS, bias=False)
        # Start at the identity transform: zero shift and log-scale.
        nn.init.zeros_(self.output_linear.weight)
        nn.init.zeros_(self.output_linear.bias)
        nn.init.zeros_(self.context_out.weight)

    def forward(self, a: torch.Tensor, k: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.gelu(self.input_linear(a) + self.context_in(k))
        for linear in self.hidden_linears:
            h = F.gelu(linear(h))
        out = self.output_linear(h) + self.context_out(k)
        shift, log_scale = out.chunk(2, dim=-1)
        log_scale = torch.clamp(log_scale, -self.log_scale_clamp, self.log_scale_clamp)
        return shift, log_scale


@dataclass(frozen=True)
class ForcedDimension:
    """Constraint on one data dimension during sampling.

    Either a fixed value or an interval realized by rejection from the
    learned conditional.  Downstream dimensions condition on the result.
    """

    dim: int
    value: float | None = None
    interval: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.dim < N_DIMS:
            raise ConfigError(f"forced dim must be in [0, {N_DIMS})")
        if (self.value is None) == (self.interval is None):
            raise ConfigError("specify exactly one of value or interval")
        if self.interval is not None and self.interval[0] > self.interval[1]:
            raise ConfigError("forced interval must be ordered")


@dataclass
class DensityEvaluation:
    """Latents and per-dimension log-density terms for one point."""

    latents: np.ndarray
    per_dim_terms: np.ndarray
    log_prob_u: float
    log_prob_x: float
    log_prob_y: float

    @property
    def total(self) -> float:
        return self.log_prob_u + self.log_prob_x + self.log_prob_y


class AffineMaskedFlow(nn.Module):
    """Stacked conditional masked affine layers with exact likelihoods."""

    def __init__(self, config: FlowConfig):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(
            ConditionalMade(
                build_masks(
                    config.hidden_sizes,
                    seed=config.mask_seed + i,
                    non_autoregressive=config.non_autoregressive,
                ),
                context_dim=config.context_dim,
                log_scale_clamp=config.log_scale_clamp,
            )
            for i in range(config.n_layers)
        )

    def transform(self, a: torch.Tensor, k: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Data to latent; returns latents and per-dimension log-det terms."""
        x = a
        logdet = torch.zeros_like(a)
        for index, layer in enumerate(self.layers):
            shift, log_scale = layer(x, k)
            if not (torch.isfinite(shift).all() and torch.isfinite(log_scale).all()):
                raise NumericFault("non-finite flow parameters", layer=index)
            x = (x - shift) * torch.exp(log_scale)
            logdet = logdet + log_scale
        return x, logdet

    def per_dim_log_terms(self, a: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        z, logdet = self.transform(a, k)
        return -0.5 * z * z - LOG_SQRT_2PI + logdet

    def grouped_log_prob(
        self, a: torch.Tensor, k: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """log p(u|k), log p(x|u,k), log p(y|x,u,k) for a ``[B, 5]`` batch."""
        terms = self.per_dim_log_terms(a, k)
        return (
            terms[:, list(U_DIMS)].sum(dim=-1),
            terms[:, list(X_DIMS)].sum(dim=-1),
            terms[:, list(Y_DIMS)].sum(dim=-1),
        )

    def log_prob(self, a: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        """Total log-density, defined as the sum of the three group terms."""
        lp_u, lp_x, lp_y = self.grouped_log_prob(a, k)
        return lp_u + lp_x + lp_y

    def evaluate_density(self, a: np.ndarray, k: np.ndarray) -> DensityEvaluation:
        """Single-point evaluation with latents and grouped terms exposed."""
        dtype = next(self.parameters()).dtype
        a_t = torch.as_tensor(np.asarray(a), dtype=dtype).reshape(1, N_DIMS)
        k_t = torch.as_tensor(np.asarray(k), dtype=dtype).reshape(1, -1)
        with torch.no_grad():
            z, logdet = self.transform(a_t, k_t)
            terms = -0.5 * z * z - LOG_SQRT_2PI + logdet
        terms_np = terms[0].cpu().numpy()
        return DensityEvaluation(
            latents=z[0].cpu().numpy(),
            per_dim_terms=terms_np,
            log_prob_u=float(terms_np[list(U_DIMS)].sum()),
            log_prob_x=float(terms_np[list(X_DIMS)].sum()),
            log_prob_y=float(terms_np[list(Y_DIMS)].sum()),
        )

    # -- sampling -----------------------------------------------------------

    def _invert_group_rows(
        self, xs: list[torch.Tensor], k: torch.Tensor, dims: list[int], rows: torch.Tensor
    ) -> None:
        """Realize ``dims`` on the selected rows, top of the stack downward."""
        row_idx = rows.nonzero(as_tuple=True)[0]
        col_idx = torch.as_tensor(dims)
        for level in reversed(range(len(self.layers))):
            shift, log_scale = self.layers[level](xs[level], k)
            updated = xs[level + 1][:, dims] * torch.exp(-log_scale[:, dims]) + shift[:, dims]
            xs[level][row_idx[:, None], col_idx[None, :]] = updated[row_idx]

    def _refresh_intermediates(self, xs: list[torch.Tensor], k: torch.Tensor, dim: int) -> None:
        """Recompute levels above the data level for one overridden dim."""
        for level, layer in enumerate(self.layers):
            shift, log_scale = layer(xs[level], k)
            xs[level + 1][:, dim] = (xs[level][:, dim] - shift[:, dim]) * torch.exp(log_scale[:, dim])

    @torch.no_grad()
    def inverse(self, z: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        """Latent to data, realizing groups in causal order."""
        xs = [torch.zeros_like(z) for _ in self.layers] + [z.clone()]
        all_rows = torch.ones(z.shape[0], dtype=torch.bool)
        for group in GROUPS:
            self._invert_group_rows(xs, k, list(group), all_rows)
        return xs[0]

    @torch.no_grad()
    def sample(
        self,
        k: torch.Tensor,
        n: int | None = None,
        generator: torch.Generator | None = None,
        forced: ForcedDimension | None = None,
        max_attempts: int = 10_000,
        return_latents: bool = False,
    ) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
        """Draw samples in causal order, honoring an optional forced dim.

        ``k`` is ``[C]`` (with ``n`` draws) or ``[B, C]`` (one draw per
        row).  Interval forcing redraws the latent of the forced dimension
        until it lands inside the interval; exhausting the attempt budget
        raises :class:`InfeasibleConstraintError`.
        """
        if k.ndim == 1:
            if n is None:
                raise ValueError("n is required when a single context is given")
            k = k.unsqueeze(0).expand(n, -1)
        batch = k.shape[0]
        dtype = next(self.parameters()).dtype
        z = torch.randn(batch, N_DIMS, generator=generator, dtype=dtype)
        xs = [torch.zeros_like(z) for _ in self.layers] + [z.clone()]
        all_rows = torch.ones(batch, dtype=torch.bool)
        for group in GROUPS:
            dims = list(group)
            self._invert_group_rows(xs, k, dims, all_rows)
            if forced is None or forced.dim not in dims:
                continue
            if forced.value is not None:
                xs[0][:, forced.dim] = forced.value
                self._refresh_intermediates(xs, k, forced.dim)
            else:
                lo, hi = forced.interval
                outside = (xs[0][:, forced.dim] < lo) | (xs[0][:, forced.dim] > hi)
                attempts = 0
                while bool(outside.any()):
                    attempts += 1
                    if attempts > max_attempts:
                        raise InfeasibleConstraintError(
                            f"no draws landed in [{lo}, {hi}] after {max_attempts} rounds"
                        )
                    redraw = torch.randn(
                        int(outside.sum()), generator=generator, dtype=dtype
                    )
                    xs[-1][outside, forced.dim] = redraw
                    self._invert_group_rows(xs, k, [forced.dim], outside)
                    outside = (xs[0][:, forced.dim] < lo) | (xs[0][:, forced.dim] > hi)
        if return_latents:
            return xs[0], xs[-1]
        return xs[0]
