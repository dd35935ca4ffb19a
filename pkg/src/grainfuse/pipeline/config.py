"""Experiment configuration: defaults, YAML loading, dotted overrides.

A configuration is a plain nested dict. ``load_config`` starts from the
package defaults, deep-merges an optional YAML file, then applies
``key.path=value`` overrides (flags win over the file). Unknown keys are
rejected with the offending path named, so typos fail fast instead of
silently running the default.
"""

import copy
import hashlib
import json

import yaml

from ..errors import ConfigError

__all__ = [
    "DEFAULTS",
    "default_config",
    "load_config",
    "save_config",
    "parse_override",
    "apply_overrides",
    "config_fingerprint",
]

DEFAULTS = {
    "output_dir": "runs",
    "dataset": {
        "seed": 7,
        "train_volumes": 2,
        "val_volumes": 2,
        "dims": [96, 96, 64],
        "val_dims": [96, 96, 32],
        "n_grains": 150,
        "texture_spread": 0.8,
        "symmetry": "hexagonal-D6",
        "pca_components": 3,
    },
    "schedule": {
        "n_steps": 1000,
        "beta_start": 1.0e-4,
        "beta_end": 0.02,
    },
    "model": {
        "base_width": 32,
        "attention": False,
    },
    "train": {
        "steps": 5000,
        "batch_size": 32,
        "lr": 5.0e-4,
        "seed": 0,
        "val_batch": 64,
        "val_every": 250,
        "device": "cpu",
    },
    "solver": {
        "method": "fps-smc",
        "n_particles": 10,
        "n_reconstructions": 10,
        "n_steps": 100,
        "variance": "beta",
        "ess_fraction": 0.5,
        "eps_batch": 128,
        "seed": 0,
    },
    "observe": {
        "modality": "ep",
        "mask": "grid(4)",
        "sigma_y": 0.0,
        "pl_perturb": "none",
        # Noise level the solver assumes for the likelihood; null means
        # "same as sigma_y". Setting it apart models a mismatch between
        # the perturbation actually applied and what the solver believes.
        "assume_sigma": None,
        "slice_index": 0,
        "seed": 0,
    },
    "evaluate": {
        "tasks": ["boundary", "superres", "denoise"],
        "seed": 0,
    },
}


def default_config():
    """A deep copy of the package defaults."""
    return copy.deepcopy(DEFAULTS)


def _merge(base, update, path):
    for key, value in update.items():
        here = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(
                    f"config key {here!r} holds a section, got {value!r}"
                )
            _merge(base[key], value, here)
        else:
            base[key] = value


def parse_override(text):
    """Split one ``a.b.c=value`` override into (path tuple, parsed value).

    The value goes through the YAML scalar parser, so ``lr=1e-3`` is a
    float, ``attention=true`` a bool, ``mask=grid(4)`` a string.
    """
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    raw = raw.strip()
    # YAML's resolver misses bare scientific notation like 1e-3, so try
    # plain numeric parses first.
    for cast in (int, float):
        try:
            return tuple(key.split(".")), cast(raw)
        except ValueError:
            pass
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: unparseable value: {exc}")
    return tuple(key.split(".")), value


def apply_overrides(cfg, overrides):
    """Apply ``key.path=value`` strings in order; later ones win."""
    for text in overrides:
        path, value = parse_override(text)
        node = {}
        leaf = node
        for part in path[:-1]:
            leaf[part] = {}
            leaf = leaf[part]
        leaf[path[-1]] = value
        _merge(cfg, node, "")
    return cfg


def load_config(path=None, overrides=()):
    """Defaults, optionally merged with a YAML file, then overrides."""
    cfg = default_config()
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, loaded, "")
    apply_overrides(cfg, overrides)
    return cfg


def save_config(cfg, path):
    """Persist the resolved configuration as YAML with stable key order."""
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True, default_flow_style=False)


def config_fingerprint(cfg, keys=None):
    """Short stable hash of a config (or the named top-level sections)."""
    view = cfg if keys is None else {k: cfg[k] for k in keys}
    canon = json.dumps(view, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]
