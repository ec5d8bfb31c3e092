"""Run configuration: JSON schema with defaults, strict validation (unknown
keys rejected), dotted-path overrides, and a content hash that every output
artifact embeds so downstream commands can detect mismatched inputs."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

__all__ = [
    "ConfigError",
    "MissingArtifactError",
    "ArtifactMismatchError",
    "DEFAULT_CONFIG",
    "load_config",
    "apply_override",
    "config_hash",
    "read_manifest",
    "update_manifest",
    "check_manifest",
]

ARTIFACT_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


class MissingArtifactError(FileNotFoundError):
    """A required upstream artifact does not exist."""


class ArtifactMismatchError(ValueError):
    """An upstream artifact was produced by a different config or version."""


# the default run is the full toy benchmark: 3 agents, 96x96x16 features,
# 200 training frames / 50 eval frames
DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/default",
    "scenario": {
        "n_train": 20,
        "n_eval": 5,
        "n_agents": 3,
        "n_objects": 4,
        "n_frames": 10,
        "frame_dt_ms": 100.0,
        "roi": [48.0, 48.0, 0.5],
        "fov_radius": 20.0,
    },
    "model": {
        "channels": 16,
        "hidden": 8,
        "epochs": 30,
        "lr": 0.02,
        "batch": 4,
        "val_fraction": 0.1,
    },
    "quant": {
        "bits_weights": 8,
        "bits_acts": 8,
        "weight_granularity": "per_channel",
    },
    "calib": {
        "fraction": 0.25,
        "steps": 1,
        "t_grid": 24,
        "adaround_iters": 200,
        "adaround_lr": 0.05,
        "lambda_hetero": 1.0,
        "lambda_spatial": 0.1,
    },
    "codebook": {
        "n_L": 64,
        "n_R": 1,
        "stage1_iters": 20,
        "joint_iters": 0,
        "joint_lr": 0.01,
        "lambda_rec": 1.0,
        "feature_frames": 8,
    },
    "channel": {
        "rate_mbps": 27.0,
        "jitter_ms": [0.0, 200.0],
    },
    "latency": {
        "fp32_local_ms": 47.6,
        "fp32_fus_ms": 11.9,
        "int8_local_ms": 21.68,
        "int8_fus_ms": 5.42,
    },
    "eval": {
        "pose_noise_sigmas": [0.0, 0.1, 0.2, 0.5],
        "transport": "codebook",
        "compress_factor": 16,
    },
}


def _merge_checked(defaults, given, path=""):
    if not isinstance(given, dict):
        raise ConfigError(f"expected an object at {path or 'top level'}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict):
            out[key] = _merge_checked(defaults[key], value, here)
        else:
            if isinstance(value, bool) or not isinstance(
                    value, type_of(defaults[key])):
                raise ConfigError(
                    f"bad type for {here}: expected "
                    f"{type(defaults[key]).__name__}, got {type(value).__name__}")
            out[key] = value
    return out


def type_of(default):
    # ints are acceptable where floats are expected, not vice versa
    if isinstance(default, float):
        return (int, float)
    if isinstance(default, list):
        return list
    return type(default)


def load_config(path=None, overrides=(), seed=None, out_dir=None) -> dict:
    """Defaults, optionally merged with a JSON file, then dotted overrides."""
    if path is None:
        cfg = copy.deepcopy(DEFAULT_CONFIG)
    else:
        p = Path(path)
        if not p.exists():
            raise MissingArtifactError(f"config file not found: {p}")
        try:
            given = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        cfg = _merge_checked(DEFAULT_CONFIG, given)
    for ov in overrides:
        cfg = apply_override(cfg, ov)
    if seed is not None:
        cfg["seed"] = seed
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    return cfg


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply one 'dotted.path=value' override; value parsed as JSON when
    possible, else taken as a string."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key.path=value: {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    cfg = copy.deepcopy(cfg)
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[k]
    leaf = keys[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"cannot assign a scalar to section {dotted}")
    if isinstance(value, bool) or not isinstance(value, type_of(node[leaf])):
        raise ConfigError(
            f"bad type for {dotted}: expected {type(node[leaf]).__name__}")
    node[leaf] = value
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Artifact manifest: one JSON file per run directory recording, for each
# artifact, the producing config hash, seed, and format version
# ---------------------------------------------------------------------------


def _manifest_path(out_dir) -> Path:
    return Path(out_dir) / "manifest.json"


def read_manifest(out_dir) -> dict:
    p = _manifest_path(out_dir)
    if not p.exists():
        return {}
    return json.loads(p.read_text())


def update_manifest(out_dir, artifact: str, cfg: dict):
    m = read_manifest(out_dir)
    m[artifact] = {
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "version": ARTIFACT_VERSION,
    }
    _manifest_path(out_dir).write_text(json.dumps(m, indent=2, sort_keys=True))


def check_manifest(out_dir, artifact: str, cfg: dict):
    """Require the artifact to exist and match the current config hash."""
    entry = read_manifest(out_dir).get(artifact)
    if entry is None:
        raise MissingArtifactError(
            f"artifact {artifact!r} not found in {out_dir}; run the producing "
            "command first")
    if entry["version"] != ARTIFACT_VERSION:
        raise ArtifactMismatchError(
            f"artifact {artifact!r} has version {entry['version']}, "
            f"expected {ARTIFACT_VERSION}")
    if entry["config_hash"] != config_hash(cfg):
        raise ArtifactMismatchError(
            f"artifact {artifact!r} was produced under config "
            f"{entry['config_hash']}, current config is {config_hash(cfg)}")
