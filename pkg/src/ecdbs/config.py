"""JSON run configuration: defaults, merging, flag overrides, echoing.

A run is described by one JSON document; command-line ``--set key=value``
overrides win over the file, which wins over the defaults below.  The
resolved document is echoed into the output directory so a run can be
reproduced from its own artifacts.
"""

from __future__ import annotations

import json
import math
from copy import deepcopy


class UsageError(ValueError):
    """Bad invocation: unknown keys, invalid values, missing required paths."""


DEFAULTS = {
    "paths": {"t1": None, "t2": None, "labels": None, "out": "out"},
    "bands": {
        "knn": 5,
        "downsample": 16,
        "clusters": None,
        "expansion": 3,
        "similarity_metric": "l2",
    },
    "network": {"patch_size": 5, "hidden": 64},
    "train": {
        "epochs": 400,
        "batch_size": 128,
        "learning_rate": 0.001,
        "train_fraction": 0.0336,
        "val_fraction": 0.01,
        "tau_start": 1.0,
        "tau_end": 0.01,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
    },
    "loss": {"alpha": 0.1, "weight_changed": 5.0, "weight_unchanged": 1.0},
    "synth": {
        "bands": 32,
        "height": 64,
        "width": 64,
        "informative": None,
        "change_fraction": 0.15,
        "noise_sigma": 0.05,
    },
    "seed": 0,
}


def _merge(base, override, prefix=""):
    out = deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise UsageError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {path} must be an object")
            out[key] = _merge(base[key], value, prefix=f"{path}.")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=()):
    """Resolve defaults <- file <- --set overrides into one document."""
    document = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            document = json.load(fh)
        if not isinstance(document, dict):
            raise UsageError(f"{path}: config root must be a JSON object")
    explicit = _flatten_keys(document)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(document, key.strip(), _parse_value(raw))
        explicit.add(key.strip())
    if "bands.clusters" in explicit and "bands.downsample" in explicit:
        raise UsageError("bands.clusters and bands.downsample are mutually exclusive")
    merged = _merge(DEFAULTS, document)
    if merged["bands"]["clusters"] is not None:
        merged["bands"]["downsample"] = None  # clusters drives; keep the echo unambiguous
    return merged


def _flatten_keys(document, prefix=""):
    keys = set()
    for key, value in document.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            keys |= _flatten_keys(value, prefix=f"{path}.")
        elif value is not None:
            keys.add(path)
    return keys


def _parse_value(raw):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _set_path(document, dotted, value):
    parts = dotted.split(".")
    node = document
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise UsageError(f"config key {dotted} conflicts with a scalar entry")
    node[parts[-1]] = value


def resolve_clusters(config, bands: int) -> int:
    """Explicit cluster count wins; otherwise ceil(bands / downsample)."""
    explicit = config["bands"]["clusters"]
    if explicit is not None:
        b = int(explicit)
    else:
        rate = config["bands"]["downsample"]
        if not rate or rate < 1:
            raise UsageError(f"bands.downsample must be >= 1, got {rate}")
        b = math.ceil(bands / rate)
    if not 2 <= b < bands:
        raise UsageError(f"cluster count {b} must satisfy 2 <= b < {bands}")
    return b


def echo_config(config, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
