"""Likelihood training, checkpointing, and forecast evaluation.

The loss is the mean negative log-density of target steps under teacher
forcing.  Model selection keeps the parameters with the best validation
loss; evaluation samples autoregressive rollouts and scores the median
(MSE) and the empirical quantiles (CRPS via averaged pinball losses), both
in standardized space.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import ChannelStats, DatasetSplit, FORMAT_VERSION
from .errors import ConfigError, DataError, NumericFault
from .model import DTYPE, ModelConfig, SafetyDensityModel

DEFAULT_QUANTILES = tuple(np.round(np.linspace(0.05, 0.95, 19), 2))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 15
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.learning_rate, self.batch_size, self.max_epochs, self.patience) <= 0:
            raise ConfigError("training hyperparameters must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Checkpoint:
    """Trained model plus everything needed to reuse it."""

    model: SafetyDensityModel
    model_config: ModelConfig
    stats: ChannelStats
    metadata: dict


def _mean_nll(model: SafetyDensityModel, windows: torch.Tensor, chunk: int = 512) -> float:
    total = 0.0
    count = 0
    with torch.no_grad():
        for start in range(0, windows.shape[0], chunk):
            part = windows[start : start + chunk]
            total += float(-model.step_log_probs(part).sum())
            count += part.shape[0] * (part.shape[1] - 10)
    return total / count


def train(
    split: DatasetSplit,
    stats: ChannelStats,
    model_config: ModelConfig,
    train_config: TrainConfig,
    log_path=None,
) -> tuple[Checkpoint, list[dict]]:
    """Optimize the NLL and return the best-validation checkpoint.

    ``split`` must already be standardized.  A non-finite training loss
    aborts the loop and the last good (best validation) parameters are
    returned.  The history rows are also written as CSV when ``log_path``
    is given.
    """
    if len(split.train) == 0 or len(split.validation) == 0:
        raise DataError("train and validation splits must be non-empty")
    torch.manual_seed(train_config.seed)
    model = SafetyDensityModel(model_config)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    train_t = torch.as_tensor(np.asarray(split.train), dtype=DTYPE)
    val_t = torch.as_tensor(np.asarray(split.validation), dtype=DTYPE)
    rng = np.random.default_rng(train_config.seed)

    best_val = math.inf
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    history: list[dict] = []
    aborted = False

    for epoch in range(1, train_config.max_epochs + 1):
        model.train()
        order = rng.permutation(train_t.shape[0])
        losses = []
        for start in range(0, len(order), train_config.batch_size):
            batch = train_t[order[start : start + train_config.batch_size]]
            try:
                loss = -model.step_log_probs(batch).mean()
            except NumericFault:
                aborted = True
                break
            if not torch.isfinite(loss):
                aborted = True
                break
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        if aborted:
            break
        model.eval()
        val_nll = _mean_nll(model, val_t)
        history.append({"epoch": epoch, "train_nll": float(np.mean(losses)), "val_nll": val_nll})
        if val_nll < best_val:
            best_val = val_nll
            best_state = copy.deepcopy(model.state_dict())
            best_epoch = epoch
        elif epoch - best_epoch >= train_config.patience:
            break

    model.load_state_dict(best_state)
    model.eval()
    if log_path is not None:
        write_training_log(log_path, history)
    metadata = {
        "epoch": best_epoch,
        "val_nll": best_val if best_val < math.inf else None,
        "seed": train_config.seed,
        "aborted": aborted,
        "epochs_run": len(history),
        "train_config": train_config.to_dict(),
    }
    return Checkpoint(model=model, model_config=model_config, stats=stats, metadata=metadata), history


def write_training_log(path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_nll", "val_nll"])
        for row in history:
            writer.writerow([row["epoch"], f"{row['train_nll']:.6f}", f"{row['val_nll']:.6f}"])


# ---------------------------------------------------------------------------
# Checkpoint persistence: flat parameter blob + JSON sidecar
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = ckpt.model.state_dict()
    names = list(state.keys())
    flat = (
        np.concatenate([state[name].detach().cpu().numpy().ravel() for name in names])
        if names
        else np.empty(0)
    )
    np.save(directory / "params.npy", flat.astype(np.float64))
    sidecar = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "stats": ckpt.stats.to_dict(),
        "metadata": ckpt.metadata,
        "tensors": [{"name": name, "shape": list(state[name].shape)} for name in names],
    }
    with open(directory / "checkpoint.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    sidecar_path = directory / "checkpoint.json"
    if not sidecar_path.exists():
        raise DataError(f"missing checkpoint sidecar {sidecar_path}")
    with open(sidecar_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format_version {meta.get('format_version')}")
    model_config = ModelConfig.from_dict(meta["model_config"])
    model = SafetyDensityModel(model_config)
    flat = np.load(directory / "params.npy")
    state = {}
    offset = 0
    for entry in meta["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        block = flat[offset : offset + size].reshape(entry["shape"])
        state[entry["name"]] = torch.as_tensor(block, dtype=DTYPE)
        offset += size
    if offset != flat.size:
        raise DataError("checkpoint blob size does not match tensor layout")
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(
        model=model,
        model_config=model_config,
        stats=ChannelStats.from_dict(meta["stats"]),
        metadata=meta["metadata"],
    )


# ---------------------------------------------------------------------------
# Forecast evaluation
# ---------------------------------------------------------------------------


def pinball_loss(truth, prediction, quantile: float):
    """Quantile loss (q - 1{truth < prediction}) * (truth - prediction)."""
    truth = np.asarray(truth, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    return (quantile - (truth < prediction)) * (truth - prediction)


def crps_from_samples(samples: np.ndarray, truth: np.ndarray, quantiles=DEFAULT_QUANTILES) -> np.ndarray:
    """Averaged-pinball CRPS approximation per scalar target.

    ``samples`` has shape ``[n, *target_shape]``; the result has
    ``target_shape``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    qs = np.quantile(samples, list(quantiles), axis=0)
    acc = np.zeros_like(truth)
    for level, pred in zip(quantiles, qs):
        acc += pinball_loss(truth, pred, level)
    return 2.0 * acc / len(quantiles)


def evaluate_forecast(
    ckpt: Checkpoint,
    test_windows: np.ndarray,
    n_samples: int = 1000,
    seed: int = 0,
    quantiles=DEFAULT_QUANTILES,
    max_windows: int | None = None,
) -> tuple[float, float]:
    """Rollout-based (MSE, CRPS) over a standardized test set.

    Per window: sample ``n_samples`` autoregressive trajectories, score the
    per-step per-channel median against the truth for MSE, and the sample
    quantiles for CRPS.  One set of rollouts feeds both metrics.
    """
    model = ckpt.model
    model.eval()
    test_windows = np.asarray(test_windows, dtype=np.float64)
    if max_windows is not None:
        test_windows = test_windows[:max_windows]
    generator = torch.Generator().manual_seed(seed)
    mse_values = []
    crps_values = []
    for window in test_windows:
        samples = model.rollout(window[:10], n_samples, generator=generator).cpu().numpy()
        truth = window[10:]
        median = np.median(samples, axis=0)
        mse_values.append(float(np.mean((median - truth) ** 2)))
        crps_values.append(float(np.mean(crps_from_samples(samples, truth, quantiles))))
    return float(np.mean(mse_values)), float(np.mean(crps_values))


def evaluate_mse(ckpt: Checkpoint, test_windows, n_samples: int = 1000, seed: int = 0, max_windows=None) -> float:
    return evaluate_forecast(ckpt, test_windows, n_samples, seed, max_windows=max_windows)[0]


def evaluate_crps(
    ckpt: Checkpoint,
    test_windows,
    n_samples: int = 1000,
    seed: int = 0,
    quantiles=DEFAULT_QUANTILES,
    max_windows=None,
) -> float:
    return evaluate_forecast(ckpt, test_windows, n_samples, seed, quantiles, max_windows=max_windows)[1]


def run_ablation(
    split: DatasetSplit,
    stats: ChannelStats,
    model_config: ModelConfig,
    train_config: TrainConfig,
    n_samples: int = 1000,
    seed: int = 0,
    max_windows: int | None = None,
) -> dict:
    """Train the causal flow and its non-autoregressive ablation identically.

    Returns ``{variant: {"mse": ..., "crps": ..., "val_nll": ...}}`` for the
    two mask variants under the same data, seeds and protocol.
    """
    results = {}
    for name, non_autoregressive in (("autoregressive", False), ("non_autoregressive", True)):
        flow_cfg = dataclasses.replace(model_config.flow, non_autoregressive=non_autoregressive)
        cfg = ModelConfig(encoder=model_config.encoder, flow=flow_cfg)
        ckpt, _ = train(split, stats, cfg, train_config)
        mse, crps = evaluate_forecast(
            ckpt, split.test, n_samples=n_samples, seed=seed, max_windows=max_windows
        )
        results[name] = {"mse": mse, "crps": crps, "val_nll": ckpt.metadata["val_nll"]}
    return results
