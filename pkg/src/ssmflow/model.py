"""Full density model: context encoder feeding the masked flow head.

All sequence inputs are standardized windows.  The model runs in double
precision; tight invertibility and oracle tolerances elsewhere in the suite
rely on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import CHANNELS, OBSERVED_LEN, TARGET_LEN
from .encoder import EncoderConfig, SequenceEncoder, mask_observed_batch
from .errors import ConfigError, InfeasibleConstraintError
from .flow import AffineMaskedFlow, FlowConfig, ForcedDimension

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    flow: FlowConfig

    def __post_init__(self) -> None:
        if self.flow.context_dim != self.encoder.model_dim:
            raise ConfigError("flow context_dim must equal encoder model_dim")

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "flow": self.flow.to_dict()}

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig.from_dict(payload["encoder"]),
            flow=FlowConfig.from_dict(payload["flow"]),
        )


class SafetyDensityModel(nn.Module):
    """Per-step conditional density over the 5 channels of a target window."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = SequenceEncoder(config.encoder)
        self.flow = AffineMaskedFlow(config.flow)
        self.to(DTYPE)

    def _tensor(self, array) -> torch.Tensor:
        return torch.as_tensor(np.asarray(array), dtype=DTYPE)

    def step_log_probs(self, windows: torch.Tensor) -> torch.Tensor:
        """Teacher-forced log p(a_t | k_t) per target step, ``[B, 10]``."""
        obs_values, obs_flags = mask_observed_batch(windows[:, :OBSERVED_LEN])
        target = windows[:, OBSERVED_LEN:]
        contexts = self.encoder(obs_values, obs_flags, target)
        batch = windows.shape[0]
        flat_a = target.reshape(batch * TARGET_LEN, len(CHANNELS))
        flat_k = contexts.reshape(batch * TARGET_LEN, -1)
        return self.flow.log_prob(flat_a, flat_k).reshape(batch, TARGET_LEN)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        return self.step_log_probs(windows)

    def teacher_forced_contexts(self, observed, target) -> torch.Tensor:
        """Contexts k_1..k_10 for one observation and full target, ``[10, D]``."""
        obs = self._tensor(observed).reshape(1, OBSERVED_LEN, len(CHANNELS))
        tgt = self._tensor(target).reshape(1, TARGET_LEN, len(CHANNELS))
        obs_values, obs_flags = mask_observed_batch(obs)
        with torch.no_grad():
            return self.encoder(obs_values, obs_flags, tgt)[0]

    def step_context(self, observed, realized) -> torch.Tensor:
        """Context k_t for one observation and realized steps ``[t-1, 5]``."""
        obs = self._tensor(observed).reshape(1, OBSERVED_LEN, len(CHANNELS))
        real = self._tensor(realized).reshape(1, -1, len(CHANNELS))
        if real.shape[1] >= TARGET_LEN:
            raise ValueError(f"realized prefix must be shorter than {TARGET_LEN} steps")
        obs_values, obs_flags = mask_observed_batch(obs)
        with torch.no_grad():
            return self.encoder.step_context(obs_values, obs_flags, real)[0]

    def rollout(
        self,
        observed,
        n_samples: int,
        generator: torch.Generator | None = None,
        forced_steps: dict[int, ForcedDimension] | None = None,
        max_attempts: int = 10_000,
    ) -> torch.Tensor:
        """Autoregressive sampling of the 10 target steps, ``[n, 10, 5]``.

        Sampled (or forced) values feed back into the decoder as realized
        history, so later contexts reflect earlier realizations.
        """
        obs = self._tensor(observed).reshape(1, OBSERVED_LEN, len(CHANNELS))
        obs_values, obs_flags = mask_observed_batch(obs)
        with torch.no_grad():
            memory = self.encoder.encode_memory(obs_values, obs_flags)
            memory = memory.expand(n_samples, -1, -1)
            seed_input = obs_values[:, -1:, :].expand(n_samples, -1, -1)
            realized = torch.empty(n_samples, 0, len(CHANNELS), dtype=DTYPE)
            for t in range(1, TARGET_LEN + 1):
                decoder_inputs = torch.cat([seed_input, realized], dim=1)
                k_t = self.encoder.contexts_from_inputs(memory, decoder_inputs)[:, -1, :]
                forced = forced_steps.get(t) if forced_steps else None
                try:
                    a_t = self.flow.sample(
                        k_t, generator=generator, forced=forced, max_attempts=max_attempts
                    )
                except InfeasibleConstraintError as exc:
                    raise InfeasibleConstraintError(str(exc), step=t) from exc
                realized = torch.cat([realized, a_t.unsqueeze(1)], dim=1)
        return realized
