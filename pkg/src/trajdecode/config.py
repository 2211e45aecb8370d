"""Run configuration: per-command defaults, JSON files, overrides, hashing."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields
from pathlib import Path

from .core import CANONICAL_BANDS, substream
from .errors import ConfigError
from .nn.model import HyperParams

CONFIG_FORMAT_VERSION = 1
# Keys that change where or how fast a run happens but never what it computes.
NON_SEMANTIC = {"workers", "out", "log", "config"}

_HYPER = HyperParams().as_dict()
_BANDS = [b.name for b in CANONICAL_BANDS]
_TRAIN = {"max_epochs": 12, "patience": 3, "val_fraction": 0.2, "chunk_steps": None}
_ERSP = {"hop_s": 0.016, "wavelet_cycles": 7.0, "freq_max_hz": 40}

DEFAULTS = {
    "synth": {"participants": 1, "sessions": 2, "trials": 256, "snr": 2.0, "drift": 0.0,
              "noise_exponent": 1.0, "imagery_gain": 1.0, "montage": "fc32", "seed": 0,
              "out": "synth"},
    "ersp": {"sessions": [], "ersp": _ERSP, "workers": 1, "out": "ersp"},
    "train": {"session": None, "ersp_cache": None, "ersp": _ERSP, "hyper": _HYPER,
              "train": _TRAIN, "seed": 0, "out": "train"},
    "tune": {"session": None, "ersp": _ERSP, "objective": "train", "n_configs": 200,
             "rungs": [3, 6, 12], "eta": 2, "simulated": True, "train": _TRAIN,
             "seed": 0, "workers": 1, "log": None, "out": "tune"},
    "eval": {"sessions": [], "strategy": "WSR", "folds": 5, "ersp": _ERSP, "hyper": _HYPER,
             "train": _TRAIN, "seed": 0, "workers": 1, "out": "eval"},
    "fc": {"sessions": [], "bands": _BANDS, "n_perm": 1000, "alpha": 0.05,
           "display_threshold": 0.55, "condition": None, "seed": 0, "workers": 1, "out": "fc"},
    "topo": {"sessions": [], "bands": _BANDS, "condition": None, "out": "topo"},
    "report": {"inputs": [], "modalities": ["screen", "vr"], "out": "report"},
}


def _merge(base: dict, over: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}{k} must be an object")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(command: str, path=None, overrides: dict | None = None) -> dict:
    """Defaults <- JSON file <- overrides (flags win). Unknown keys are errors."""
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    cfg = copy.deepcopy(DEFAULTS[command])
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        data.pop("format_version", None)
        data.pop("config_hash", None)
        cfg = _merge(cfg, data, "")
    if overrides:
        cfg = _merge(cfg, overrides, "")
    return cfg


def parse_set(items) -> dict:
    """``key.sub=value`` strings into a nested dict; values are JSON when possible."""
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return out


def semantic_view(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in NON_SEMANTIC}


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON of the semantic part of a config.

    Input paths are reduced to their final component so the hash does not
    depend on where data happen to live.
    """
    def norm(v):
        if isinstance(v, dict):
            return {k: norm(x) for k, x in v.items()}
        if isinstance(v, list):
            return [norm(x) for x in v]
        if isinstance(v, str) and ("/" in v or "\\" in v):
            return Path(v).name
        return v
    blob = json.dumps(norm(semantic_view(cfg)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def write_resolved(cfg: dict, out_dir, command: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"format_version": CONFIG_FORMAT_VERSION, "command": command,
           "config_hash": config_hash(cfg), **cfg}
    path = out / f"{command}_config.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def hyper_from(cfg: dict) -> HyperParams:
    known = {f.name for f in fields(HyperParams)}
    extra = set(cfg) - known
    if extra:
        raise ConfigError(f"unknown hyperparameters {sorted(extra)}")
    try:
        return HyperParams(**cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid hyperparameters: {exc}") from None


def derived_seed(seed: int, *names) -> int:
    """Integer seed for a named substream (data, init, folds, permutations)."""
    return int(substream(seed, *names).integers(0, 2**31))
