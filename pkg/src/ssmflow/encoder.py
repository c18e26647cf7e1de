"""Transformer encoder-decoder producing per-step context vectors.

The observed half of a window is partially masked (late action and TTC
steps removed) and encoded; a causally masked decoder consumes the already
realized target steps and emits one context vector per future step.  The
context is the sole conditioning input of the density head.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from .data import CH_AI, CH_AJ, CH_TTC, CHANNELS, OBSERVED_LEN, TARGET_LEN
from .errors import ConfigError

# Steps 6..10 (1-indexed) of the acceleration and TTC channels are hidden
# from the encoder so the context cannot trivially extrapolate them.
MASKED_CHANNELS = (CH_AI, CH_AJ, CH_TTC)
MASKED_STEPS = slice(5, OBSERVED_LEN)


@dataclass(frozen=True)
class EncoderConfig:
    """Transformer hyperparameters (positional encodings are learnable)."""

    model_dim: int = 40
    feedforward_dim: int = 160
    dropout: float = 0.1
    num_heads: int = 8
    encoder_blocks: int = 3
    decoder_blocks: int = 3
    activation: str = "gelu"

    def __post_init__(self) -> None:
        if self.model_dim % self.num_heads != 0:
            raise ConfigError("model_dim must be divisible by num_heads")
        if min(self.model_dim, self.feedforward_dim, self.encoder_blocks, self.decoder_blocks) <= 0:
            raise ConfigError("encoder dimensions and block counts must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "EncoderConfig":
        return cls(**payload)


@dataclass
class MaskedObservation:
    """Observed steps with hidden entries zeroed and flagged."""

    values: np.ndarray
    missing_flags: np.ndarray


def mask_observation(window_channels: np.ndarray) -> MaskedObservation:
    """Mask the late action/TTC steps of the observed half of a window.

    Accepts a full ``[20, 5]`` window or just the observed ``[10, 5]`` part;
    speed channels are never touched.  Masked entries are replaced by the
    sentinel 0 and marked in the flag matrix.
    """
    window_channels = np.asarray(window_channels, dtype=np.float64)
    if window_channels.ndim != 2 or window_channels.shape[1] != len(CHANNELS):
        raise ValueError(f"expected [steps, {len(CHANNELS)}] observation, got {window_channels.shape}")
    observed = window_channels[:OBSERVED_LEN].copy()
    if observed.shape[0] != OBSERVED_LEN:
        raise ValueError(f"need at least {OBSERVED_LEN} observed steps")
    flags = np.zeros_like(observed)
    for ch in MASKED_CHANNELS:
        observed[MASKED_STEPS, ch] = 0.0
        flags[MASKED_STEPS, ch] = 1.0
    return MaskedObservation(values=observed, missing_flags=flags)


def mask_observed_batch(observed: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Torch batch variant of :func:`mask_observation` for ``[B, 10, 5]``."""
    values = observed.clone()
    flags = torch.zeros_like(observed)
    for ch in MASKED_CHANNELS:
        values[:, MASKED_STEPS, ch] = 0.0
        flags[:, MASKED_STEPS, ch] = 1.0
    return values, flags


class SequenceEncoder(nn.Module):
    """Encoder over the masked observation, decoder over realized targets.

    The decoder input at target step t is the 5-channel value of step t-1
    (the last masked observation step for t=1); causal self-attention makes
    every context k_t a function of the observation and steps < t only.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.model_dim
        n_ch = len(CHANNELS)
        self.input_proj = nn.Linear(2 * n_ch, d)
        self.decoder_proj = nn.Linear(n_ch, d)
        self.enc_pos = nn.Embedding(OBSERVED_LEN, d)
        self.dec_pos = nn.Embedding(TARGET_LEN, d)
        enc_layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=config.num_heads,
            dim_feedforward=config.feedforward_dim,
            dropout=config.dropout,
            activation=config.activation,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            enc_layer, num_layers=config.encoder_blocks, enable_nested_tensor=False
        )
        dec_layer = nn.TransformerDecoderLayer(
            d_model=d,
            nhead=config.num_heads,
            dim_feedforward=config.feedforward_dim,
            dropout=config.dropout,
            activation=config.activation,
            batch_first=True,
        )
        self.decoder = nn.TransformerDecoder(dec_layer, num_layers=config.decoder_blocks)

    def encode_memory(self, obs_values: torch.Tensor, obs_flags: torch.Tensor) -> torch.Tensor:
        """Encoder memory from a ``[B, 10, 5]`` masked observation."""
        if obs_values.shape[-2:] != (OBSERVED_LEN, len(CHANNELS)):
            raise ValueError(f"expected observation of shape [*, {OBSERVED_LEN}, {len(CHANNELS)}]")
        x = torch.cat([obs_values, obs_flags], dim=-1)
        x = self.input_proj(x) + self.enc_pos.weight.unsqueeze(0)
        return self.encoder(x)

    def contexts_from_inputs(
        self, memory: torch.Tensor, decoder_inputs: torch.Tensor
    ) -> torch.Tensor:
        """Contexts for each decoder position given ``[B, T, 5]`` inputs."""
        t = decoder_inputs.shape[1]
        if t > TARGET_LEN:
            raise ValueError(f"at most {TARGET_LEN} target steps are supported")
        x = self.decoder_proj(decoder_inputs) + self.dec_pos.weight[:t].unsqueeze(0)
        causal = nn.Transformer.generate_square_subsequent_mask(t, device=x.device)
        return self.decoder(x, memory, tgt_mask=causal)

    def forward(
        self,
        obs_values: torch.Tensor,
        obs_flags: torch.Tensor,
        target: torch.Tensor,
    ) -> torch.Tensor:
        """Teacher-forced contexts k_1..k_10 for ``[B, 10, 5]`` targets."""
        memory = self.encode_memory(obs_values, obs_flags)
        decoder_inputs = torch.cat([obs_values[:, -1:, :], target[:, :-1, :]], dim=1)
        return self.contexts_from_inputs(memory, decoder_inputs)

    def step_context(
        self,
        obs_values: torch.Tensor,
        obs_flags: torch.Tensor,
        realized: torch.Tensor,
    ) -> torch.Tensor:
        """Context k_t given realized target steps 1..t-1 (``[B, t-1, 5]``)."""
        memory = self.encode_memory(obs_values, obs_flags)
        decoder_inputs = torch.cat([obs_values[:, -1:, :], realized], dim=1)
        return self.contexts_from_inputs(memory, decoder_inputs)[:, -1, :]
