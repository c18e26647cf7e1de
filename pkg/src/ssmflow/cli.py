"""Command-line pipeline tying the modules together.

Subcommands: simulate | prepare | train | evaluate | ablate | probability |
counterfactual.  Every run is driven by a JSON config (validated against a
schema before any work starts), is deterministic given (config, seed), and
writes a manifest with input/output hashes next to its outputs.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric fault.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np
import torch

from . import __version__
from .counterfactual import CounterfactualSpec, effectiveness, forced_rollout
from .data import (
    ChannelStats,
    DatasetSplit,
    destandardize,
    filter_min_ttc,
    load_split,
    save_split,
    split_dataset,
    standardize,
    window_interactions,
)
from .encoder import EncoderConfig
from .errors import ConfigError, DataError, NumericFault
from .flow import FlowConfig
from .model import ModelConfig
from .probability import DEFAULT_TAXONOMY, ProbabilityEngine, X_ALL, action_probability_table, probability_quartet_table
from .simulate import ScenarioConfig, default_suite, load_streams, save_streams, simulate_interaction
from .training import (
    TrainConfig,
    evaluate_forecast,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
)

_INTERVAL = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

_SCENARIO_SCHEMA = {
    "type": "object",
    "properties": {
        "initial_gap": {"type": "number", "exclusiveMinimum": 0},
        "leader_speed": {"type": "number", "minimum": 0},
        "follower_speed": {"type": "number", "minimum": 0},
        "leader_profile": {"enum": ["stopped", "constant", "decelerating"]},
        "trigger_ttc": {"type": "number", "minimum": 0},
        "brake_range": _INTERVAL,
        "accel_noise_std": {"type": "number", "minimum": 0},
        "reaction_delay": {"type": "integer", "minimum": 0},
        "horizon": {"type": "integer", "minimum": 20},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "ttc_cap": {"type": "number", "exclusiveMinimum": 0},
        "leader_decel": {"type": "number"},
    },
    "required": ["initial_gap", "leader_speed", "follower_speed"],
    "additionalProperties": False,
}

_WINDOW_REF = {
    "type": "object",
    "properties": {
        "split": {"enum": ["train", "validation", "test"]},
        "index": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer"},
        "simulate": {
            "type": "object",
            "properties": {
                "suite": {"type": "array", "items": _SCENARIO_SCHEMA},
                "preset": {"enum": ["default"]},
                "rollouts_per_config": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "prepare": {
            "type": "object",
            "properties": {
                "streams_dir": {"type": "string"},
                "stride": {"type": "integer", "minimum": 1},
                "filter_threshold": {"type": "number", "exclusiveMinimum": 0},
                "ttc_cap": {"type": "number", "exclusiveMinimum": 0},
                "ratios": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
            },
            "required": ["streams_dir"],
            "additionalProperties": False,
        },
        "model": {
            "type": "object",
            "properties": {
                "encoder": {"type": "object"},
                "flow": {"type": "object"},
            },
            "additionalProperties": False,
        },
        "train": {
            "type": "object",
            "properties": {
                "data_dir": {"type": "string"},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "patience": {"type": "integer", "minimum": 1},
            },
            "required": ["data_dir"],
            "additionalProperties": False,
        },
        "evaluate": {
            "type": "object",
            "properties": {
                "data_dir": {"type": "string"},
                "checkpoint_dir": {"type": "string"},
                "n_samples": {"type": "integer", "minimum": 1},
                "max_windows": {"type": ["integer", "null"], "minimum": 1},
            },
            "required": ["data_dir", "checkpoint_dir"],
            "additionalProperties": False,
        },
        "ablate": {
            "type": "object",
            "properties": {
                "data_dir": {"type": "string"},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "patience": {"type": "integer", "minimum": 1},
                "n_samples": {"type": "integer", "minimum": 1},
                "max_windows": {"type": ["integer", "null"], "minimum": 1},
            },
            "required": ["data_dir"],
            "additionalProperties": False,
        },
        "probability": {
            "type": "object",
            "properties": {
                "data_dir": {"type": "string"},
                "checkpoint_dir": {"type": "string"},
                "window": _WINDOW_REF,
                "n_rollouts": {"type": "integer", "minimum": 10},
                "n_mc": {"type": "integer", "minimum": 100},
                "band": _INTERVAL,
                "action": {"type": "string"},
            },
            "required": ["data_dir", "checkpoint_dir"],
            "additionalProperties": False,
        },
        "counterfactual": {
            "type": "object",
            "properties": {
                "data_dir": {"type": "string"},
                "checkpoint_dir": {"type": "string"},
                "window": _WINDOW_REF,
                "n_rollouts": {"type": "integer", "minimum": 10},
                "n_mc": {"type": "integer", "minimum": 100},
                "band": _INTERVAL,
                "intervention": {
                    "type": "object",
                    "properties": {
                        "interval": _INTERVAL,
                        "value": {"type": "number"},
                        "steps": {"type": "array", "items": {"type": "integer", "minimum": 1, "maximum": 10}},
                    },
                    "additionalProperties": False,
                },
            },
            "required": ["data_dir", "checkpoint_dir"],
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path, encoding="utf-8") as fh:
            config = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config schema violation: {exc.message}") from exc
    return config


def _section(config: dict, name: str) -> dict:
    if name not in config:
        raise ConfigError(f"config is missing the '{name}' section")
    return config[name]


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, subcommand: str, seed: int, section: dict, inputs, outputs) -> None:
    manifest = {
        "format_version": 1,
        "subcommand": subcommand,
        "seed": seed,
        "config": section,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "outputs": {Path(p).name: _sha256(Path(p)) for p in outputs},
        "versions": {"ssmflow": __version__, "numpy": np.__version__, "torch": torch.__version__},
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _percent_rows(labels: list[str], values: np.ndarray) -> list[list[str]]:
    return [[label] + [f"{100.0 * v:.2f}" for v in row] for label, row in zip(labels, values)]


def _step_header(n_steps: int) -> list[str]:
    return ["quantity"] + [f"step_{t}" for t in range(1, n_steps + 1)]


def _model_config(config: dict) -> ModelConfig:
    section = config.get("model", {})
    encoder = EncoderConfig(**section.get("encoder", {}))
    flow_overrides = dict(section.get("flow", {}))
    flow_overrides.setdefault("context_dim", encoder.model_dim)
    if "hidden_sizes" in flow_overrides:
        flow_overrides["hidden_sizes"] = tuple(flow_overrides["hidden_sizes"])
    flow = FlowConfig(**flow_overrides)
    return ModelConfig(encoder=encoder, flow=flow)


def _select_window(split: DatasetSplit, stats: ChannelStats, ref: dict) -> np.ndarray:
    name = ref.get("split", "test")
    index = ref.get("index", 0)
    arrays = {"train": split.train, "validation": split.validation, "test": split.test}
    windows = arrays[name]
    if index >= len(windows):
        raise DataError(f"window index {index} out of range for split '{name}' of size {len(windows)}")
    return destandardize(windows[index], stats)


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def cmd_simulate(config: dict, seed: int, out_dir: Path, config_path: Path) -> None:
    section = _section(config, "simulate")
    if "suite" in section:
        configs = [ScenarioConfig.from_dict(d) for d in section["suite"]]
    elif section.get("preset") == "default":
        configs = default_suite()
    else:
        raise ConfigError("simulate needs either a 'suite' or the 'default' preset")
    rollouts = section.get("rollouts_per_config", 20)
    rollout_seeds = np.random.SeedSequence(seed).generate_state(len(configs) * rollouts)
    traces = []
    indices = []
    pos = 0
    for ci, scenario in enumerate(configs):
        for _ in range(rollouts):
            traces.append(simulate_interaction(scenario, seed=int(rollout_seeds[pos])))
            indices.append(ci)
            pos += 1
    save_streams(out_dir, traces, configs, indices, seed)
    write_manifest(
        out_dir,
        "simulate",
        seed,
        section,
        inputs=[config_path],
        outputs=[out_dir / "streams.npy", out_dir / "streams.json"],
    )


def cmd_prepare(config: dict, seed: int, out_dir: Path, config_path: Path) -> None:
    section = _section(config, "prepare")
    streams_dir = Path(section["streams_dir"])
    streams, _meta = load_streams(streams_dir)
    stride = section.get("stride", 5)
    threshold = section.get("filter_threshold", 4.0)
    ttc_cap = section.get("ttc_cap", 10.0)
    ratios = tuple(section.get("ratios", (0.8, 0.1, 0.1)))
    windows = window_interactions(streams, stride=stride)
    windows = filter_min_ttc(windows, threshold=threshold)
    if len(windows) < 10:
        raise DataError(f"only {len(windows)} windows survive filtering; need at least 10")
    split = split_dataset(windows, seed=seed, ratios=ratios)
    stats = ChannelStats.from_windows(split.train)
    split_std = DatasetSplit(
        train=standardize(split.train, stats),
        validation=standardize(split.validation, stats),
        test=standardize(split.test, stats),
        seed=seed,
        ratios=split.ratios,
    )
    save_split(
        out_dir,
        split_std,
        stats,
        ttc_cap=ttc_cap,
        filter_threshold=threshold,
        extra={"space": "standardized", "stride": stride, "source": str(streams_dir)},
    )
    write_manifest(
        out_dir,
        "prepare",
        seed,
        section,
        inputs=[config_path, streams_dir / "streams.npy", streams_dir / "streams.json"],
        outputs=[out_dir / name for name in ("train.npy", "validation.npy", "test.npy", "dataset.json")],
    )


def cmd_train(config: dict, seed: int, out_dir: Path, config_path: Path) -> None:
    section = _section(config, "train")
    data_dir = Path(section["data_dir"])
    split, stats, _meta = load_split(data_dir)
    model_config = _model_config(config)
    train_config = TrainConfig(
        learning_rate=section.get("learning_rate", 1e-3),
        batch_size=section.get("batch_size", 128),
        max_epochs=section.get("max_epochs", 100),
        patience=section.get("patience", 15),
        seed=seed,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt, _history = train(split, stats, model_config, train_config, log_path=out_dir / "training_log.csv")
    save_checkpoint(ckpt, out_dir)
    write_manifest(
        out_dir,
        "train",
        seed,
        section,
        inputs=[config_path, data_dir / "dataset.json", data_dir / "train.npy", data_dir / "validation.npy"],
        outputs=[out_dir / "params.npy", out_dir / "checkpoint.json", out_dir / "training_log.csv"],
    )


def cmd_evaluate(config: dict, seed: int, out_dir: Path, config_path: Path) -> None:
    section = _section(config, "evaluate")
    data_dir = Path(section["data_dir"])
    split, _stats, _meta = load_split(data_dir)
    ckpt = load_checkpoint(section["checkpoint_dir"])
    mse, crps = evaluate_forecast(
        ckpt,
        split.test,
        n_samples=section.get("n_samples", 1000),
        seed=seed,
        max_windows=section.get("max_windows"),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "metrics.csv", ["metric", "value"], [["mse", f"{mse:.6f}"], ["crps", f"{crps:.6f}"]])
    write_manifest(
        out_dir,
        "evaluate",
        seed,
        section,
        inputs=[config_path, data_dir / "test.npy", Path(section["checkpoint_dir"]) / "params.npy"],
        outputs=[out_dir / "metrics.csv"],
    )


def cmd_ablate(config: dict, seed: int, out_dir: Path, config_path: Path) -> None:
    section = _section(config, "ablate")
    data_dir = Path(section["data_dir"])
    split, stats, _meta = load_split(data_dir)
    model_config = _model_config(config)
    train_config = TrainConfig(
        learning_rate=section.get("learning_rate", 1e-3),
        batch_size=section.get("batch_size", 128),
        max_epochs=section.get("max_epochs", 100),
        patience=section.get("patience", 15),
        seed=seed,
    )
    results = run_ablation(
        split,
        stats,
        model_config,
        train_config,
        n_samples=section.get("n_samples", 1000),
        seed=seed,
        max_windows=section.get("max_windows"),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [
        [variant, f"{res['mse']:.6f}", f"{res['crps']:.6f}", f"{res['val_nll']:.6f}"]
        for variant, res in results.items()
    ]
    _write_csv(out_dir / "ablation.csv", ["variant", "mse", "crps", "val_nll"], rows)
    write_manifest(
        out_dir,
        "ablate",
        seed,
        section,
        inputs=[config_path, data_dir / "dataset.json"],
        outputs=[out_dir / "ablation.csv"],
    )


def cmd_probability(config: dict, seed: int, out_dir: Path, config_path: Path) -> None:
    section = _section(config, "probability")
    data_dir = Path(section["data_dir"])
    split, stats, _meta = load_split(data_dir)
    ckpt = load_checkpoint(section["checkpoint_dir"])
    window = _select_window(split, ckpt.stats, section.get("window", {}))
    engine = ProbabilityEngine(
        ckpt,
        window,
        n_rollouts=section.get("n_rollouts", 1000),
        seed=seed,
        n_mc=section.get("n_mc", 10_000),
    )
    band = tuple(section.get("band", (25.0, 75.0)))
    out_dir.mkdir(parents=True, exist_ok=True)

    labels, values, errors = action_probability_table(engine, DEFAULT_TAXONOMY, band=band)
    header = _step_header(values.shape[1])
    _write_csv(out_dir / "action_probability.csv", header, _percent_rows(labels, values))
    _write_csv(out_dir / "action_probability_stderr.csv", header, _percent_rows(labels, errors))

    action = section.get("action", "all")
    x_intervals = X_ALL if action == "all" else DEFAULT_TAXONOMY.x_intervals(action)
    labels, values, errors = probability_quartet_table(engine, x_intervals, band=band)
    _write_csv(out_dir / "probability_table.csv", header, _percent_rows(labels, values))
    _write_csv(out_dir / "probability_table_stderr.csv", header, _percent_rows(labels, errors))

    write_manifest(
        out_dir,
        "probability",
        seed,
        section,
        inputs=[config_path, data_dir / "dataset.json", Path(section["checkpoint_dir"]) / "params.npy"],
        outputs=[
            out_dir / "action_probability.csv",
            out_dir / "action_probability_stderr.csv",
            out_dir / "probability_table.csv",
            out_dir / "probability_table_stderr.csv",
        ],
    )


def cmd_counterfactual(config: dict, seed: int, out_dir: Path, config_path: Path) -> None:
    section = _section(config, "counterfactual")
    data_dir = Path(section["data_dir"])
    split, stats, _meta = load_split(data_dir)
    ckpt = load_checkpoint(section["checkpoint_dir"])
    window = _select_window(split, ckpt.stats, section.get("window", {}))
    band = tuple(section.get("band", (25.0, 75.0)))
    series = effectiveness(
        ckpt,
        window,
        band=band,
        n_rollouts=section.get("n_rollouts", 1000),
        n_mc=section.get("n_mc", 10_000),
        seed=seed,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    header = _step_header(len(series.effect))
    labels = ["P(crash|evasive)", "P(crash|no_action)", "effectiveness"]
    values = np.stack([series.p_crash_evasive, series.p_crash_no_action, series.effect])
    _write_csv(out_dir / "counterfactual.csv", header, _percent_rows(labels, values))
    _write_csv(
        out_dir / "counterfactual_stderr.csv",
        header,
        _percent_rows(["effectiveness_stderr"], series.stderr[None, :]),
    )
    outputs = [out_dir / "counterfactual.csv", out_dir / "counterfactual_stderr.csv"]

    if "intervention" in section:
        iv = section["intervention"]
        spec = CounterfactualSpec(
            interval=tuple(iv["interval"]) if "interval" in iv else None,
            value=iv.get("value"),
            steps=tuple(iv.get("steps", range(1, 11))),
        )
        rollout = forced_rollout(
            ckpt, window, spec, n_samples=section.get("n_rollouts", 1000), seed=seed
        )
        median = rollout.median
        rows = [
            [name] + [f"{median[t, ch]:.4f}" for t in range(median.shape[0])]
            for ch, name in enumerate(("v_i", "v_j", "a_i", "a_j", "ttc"))
        ]
        _write_csv(out_dir / "forced_median.csv", _step_header(median.shape[0]), rows)
        outputs.append(out_dir / "forced_median.csv")

    write_manifest(
        out_dir,
        "counterfactual",
        seed,
        section,
        inputs=[config_path, data_dir / "dataset.json", Path(section["checkpoint_dir"]) / "params.npy"],
        outputs=outputs,
    )


HANDLERS = {
    "simulate": cmd_simulate,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "probability": cmd_probability,
    "counterfactual": cmd_counterfactual,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssmflow",
        description="Probabilistic traffic-interaction prediction and crash-probability queries",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in HANDLERS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        seed = args.seed if args.seed is not None else config.get("seed", 0)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](config, seed, out_dir, Path(args.config))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
