"""Run configuration: one JSON file describing a whole training run.

The file has four sections. "model" holds architecture overrides (anything
omitted falls back to the toy preset), "train" maps onto TrainConfig,
"data" points at the manifests and vocabulary, and "output_dir" is where
checkpoints and logs land. Widths that depend on the data, the vocabulary
size and the per-modality feature dims, are never written in the config;
they are derived from the files themselves so the two can't disagree.

Validation is exhaustive: unknown keys anywhere are an error, every value
is type-checked, and ``resolved_dict`` materialises every default so a
run can be reproduced from the printed config alone.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

from .data import Manifest, load_manifest
from .model import ModelConfig
from .tokenizer import Vocabulary, load_vocab
from .training import TrainConfig, TrainError


class ConfigError(ValueError):
    """Raised for unparseable, incomplete, or contradictory run configs."""


# Section schemas: key -> required JSON type. bool must be checked before
# int (True is an int in Python), and int is accepted where float is asked.
_MODEL_KEYS = {
    "d_model": int, "n_heads": int, "d_head": int, "d_ff": int,
    "n_enc_layers": int, "n_dec_layers": int, "n_mem_slots": int,
    "max_seq_len": int, "dropout_rate": float, "encoder_positional": bool,
}
_TRAIN_KEYS = {
    "mode": str, "batch_size": int, "max_epochs": int, "learning_rate": float,
    "grad_clip": float, "seed": int, "checkpoint_every": int,
    "validate_every": int, "scst_beam_size": int,
}
_DATA_KEYS = {"train_manifest": str, "val_manifest": str, "vocab": str}
_TOP_KEYS = {"model", "train", "data", "output_dir", "init_checkpoint"}


def _check_value(path: str, value, expected: type):
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _check_section(name: str, raw, schema: dict[str, type]) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object, got {type(raw).__name__}")
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"{name}: unknown key {key!r} "
                              f"(allowed: {', '.join(sorted(schema))})")
        out[key] = _check_value(f"{name}.{key}", value, schema[key])
    return out


@dataclass(frozen=True)
class RunConfig:
    """A fully validated run description with paths made absolute."""

    model_overrides: dict
    train: TrainConfig
    train_manifest: str
    val_manifest: str | None
    vocab_path: str
    output_dir: str
    init_checkpoint: str | None = None


def load_run_config(path) -> RunConfig:
    """Parse and validate a run-config JSON file.

    Relative paths inside the file are taken relative to the file's own
    directory, so a config can be moved together with its data.
    """
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config {path!r} is not valid JSON: line {exc.lineno} "
            f"column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown top-level key {key!r} "
                              f"(allowed: {', '.join(sorted(_TOP_KEYS))})")

    model = _check_section("model", raw.get("model", {}), _MODEL_KEYS)
    train_raw = _check_section("train", raw.get("train", {}), _TRAIN_KEYS)
    data = _check_section("data", raw.get("data", {}), _DATA_KEYS)

    if "train_manifest" not in data:
        raise ConfigError("data.train_manifest is required")
    if "vocab" not in data:
        raise ConfigError("data.vocab is required")
    if "output_dir" not in raw:
        raise ConfigError("output_dir is required")
    out_dir = _check_value("output_dir", raw["output_dir"], str)
    init_ckpt = None
    if "init_checkpoint" in raw:
        init_ckpt = _check_value("init_checkpoint", raw["init_checkpoint"], str)

    try:
        train = TrainConfig(**train_raw)
    except TrainError as exc:
        raise ConfigError(f"train: {exc}") from exc

    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(base, p))

    return RunConfig(
        model_overrides=model,
        train=train,
        train_manifest=resolve(data["train_manifest"]),
        val_manifest=resolve(data["val_manifest"]) if "val_manifest" in data else None,
        vocab_path=resolve(data["vocab"]),
        output_dir=resolve(out_dir),
        init_checkpoint=resolve(init_ckpt) if init_ckpt is not None else None,
    )


def resolve_model_config(run: RunConfig) -> tuple[ModelConfig, Vocabulary, Manifest]:
    """Load the vocab and train manifest and derive the full ModelConfig.

    vocab_size comes from the vocabulary file and the modality widths from
    the manifest's declared feature dims, in manifest order.
    """
    vocab = load_vocab(run.vocab_path)
    manifest = load_manifest(run.train_manifest)
    dims = tuple(m.dim for m in manifest.modalities)
    try:
        cfg = ModelConfig.toy(vocab_size=len(vocab), modality_input_dims=dims,
                              **run.model_overrides)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    return cfg, vocab, manifest


def resolved_dict(run: RunConfig, model_cfg: ModelConfig) -> dict:
    """Every setting, including defaults and derived widths, as plain JSON."""
    model = dataclasses.asdict(model_cfg)
    model["modality_input_dims"] = list(model["modality_input_dims"])
    return {
        "model": model,
        "train": dataclasses.asdict(run.train),
        "data": {
            "train_manifest": run.train_manifest,
            "val_manifest": run.val_manifest,
            "vocab": run.vocab_path,
        },
        "output_dir": run.output_dir,
        "init_checkpoint": run.init_checkpoint,
    }
