"""
src/config.py - YAML I/O, Layered Experiment Config, Checkpoint Backups

The run configuration is two YAML files stacked: config.yaml at the project
root holds every default, experiments/<name>/experiment.yaml overrides a few
of them. The merged mapping is what experiment_config.py validates.

FUNCTIONS:
----------
load_yaml(path):
    safe_load one file. An empty file is {}.
    Used by: load_layered_config

save_yaml(path, data):
    Block-style YAML, keys in insertion order.
    Used by: artifact_manager.py for config.echo

deep_merge(base, override):
    Mappings merge recursively; lists and scalars in override replace.

load_layered_config(defaults_path, experiment_path):
    config.yaml defaults <- experiment.yaml overrides.
    Used by: cli/main.py

backup_stale(directory, filename):
    Move a file out of the way as <stem>_NNNN.bak (first free counter).
    Used by: artifact_manager.py for checkpoints of another config

compute_config_hash(config_dict):
    MD5 over sorted-key YAML of the effective config, with fields that cannot
    change results (output location, log cadence, workers) removed.

USAGE:
------
    from src.config import load_layered_config, compute_config_hash

    raw = load_layered_config(Path("config.yaml"), Path("experiments/smoke/experiment.yaml"))
    config_hash = compute_config_hash(raw)
"""

import copy
import hashlib
from pathlib import Path

import yaml

# Fields that never change training or evaluation results
VOLATILE_FIELDS = {
    'output': None,
    'train': ('log_every',),
    'runtime': ('workers',),
}


def load_yaml(path):
    """
    Read one config file.

    Raises:
        FileNotFoundError: path does not exist
        yaml.YAMLError: malformed YAML (the CLI maps both to exit 2)
    """
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    return {} if data is None else data


def save_yaml(path, data):
    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(data, f, default_flow_style=False, allow_unicode=True, sort_keys=False)


def deep_merge(base: dict, override: dict) -> dict:
    """
    Merge override into a copy of base.

    Example:
        deep_merge({'loss': {'tau_s': 0.1, 'lambda_neg': 1.0}}, {'loss': {'lambda_neg': 0.0}})
        # -> {'loss': {'tau_s': 0.1, 'lambda_neg': 0.0}}
    """
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_layered_config(defaults_path, experiment_path=None) -> dict:
    defaults = load_yaml(defaults_path) if defaults_path and Path(defaults_path).exists() else {}
    if experiment_path is None:
        return defaults
    return deep_merge(defaults, load_yaml(experiment_path))


def backup_stale(directory, filename) -> Path:
    """
    Rename directory/filename to <stem>_0001.bak (or the next free counter).

    Returns the freed path. A missing file is left alone.
    """
    directory = Path(directory)
    target = directory / filename
    if not target.exists():
        return target

    stem = Path(filename).stem
    n = 1
    while (directory / f"{stem}_{n:04d}.bak").exists():
        n += 1
    backup = directory / f"{stem}_{n:04d}.bak"
    target.rename(backup)
    print(f"   📦 {filename} belongs to another config, moved to {backup.name}")
    return target


def compute_config_hash(config_dict: dict) -> str:
    """
    MD5 of the result-relevant part of an effective config.

    Decides whether checkpoints already in an output directory may be resumed
    or must be backed up first. Stored in summary.json and every checkpoint.
    """
    relevant = copy.deepcopy(config_dict)
    for section, keys in VOLATILE_FIELDS.items():
        if keys is None:
            relevant.pop(section, None)
        elif isinstance(relevant.get(section), dict):
            for key in keys:
                relevant[section].pop(key, None)

    canonical = yaml.dump(relevant, sort_keys=True, default_flow_style=False)
    return hashlib.md5(canonical.encode('utf-8')).hexdigest()
