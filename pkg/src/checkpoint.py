"""
src/checkpoint.py - Versioned Training Checkpoints

A checkpoint is a single .npz container. Arrays are stored under prefixed
keys, metadata as one JSON string:

    __meta__              {"format_version", "epoch", "step", "iteration",
                           "seed", "config_hash", "shapes"}
    student.<param>       student parameters
    teacher.<param>       teacher parameters
    center                teacher centering vector (K,)
    opt.m.<param>         AdamW first moments
    opt.v.<param>         AdamW second moments
    opt.t                 AdamW step count

"epoch"/"iteration" name the NEXT step to run, so resuming continues exactly
where the saved run stopped. Files are written to a temp name and renamed;
identical state gives identical bytes.

USAGE:
------
    from src.checkpoint import save_checkpoint, load_checkpoint

    save_checkpoint(path, trainer.state_dict(), meta)
    state, meta = load_checkpoint(path)
"""

import json
import os
import zipfile
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from src.exceptions import ConfigError, DataFormatError

FORMAT_VERSION = 1
_META_KEY = '__meta__'
_ENTRY_TIME = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, arrays: Dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta)
    meta['format_version'] = FORMAT_VERSION
    meta['shapes'] = {k: list(np.shape(v)) for k, v in arrays.items()}

    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload[_META_KEY] = np.array(json.dumps(meta, sort_keys=True))

    tmp = path.with_name(path.name + '.tmp')
    # same layout as np.savez, minus its wall-clock entry timestamps
    with zipfile.ZipFile(tmp, 'w', compression=zipfile.ZIP_STORED, allowZip64=True) as zf:
        for key in sorted(payload):
            info = zipfile.ZipInfo(f"{key}.npy", date_time=_ENTRY_TIME)
            with zf.open(info, 'w', force_zip64=True) as f:
                np.lib.format.write_array(f, payload[key], allow_pickle=False)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    """
    Returns:
        (arrays, meta)

    Raises:
        FileNotFoundError: path missing
        DataFormatError: not a checkpoint, or shapes disagree with the metadata
        ConfigError: unsupported format version
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as e:
        raise DataFormatError(f"Unreadable checkpoint {path}: {e}") from e

    if _META_KEY not in arrays:
        raise DataFormatError(f"{path} has no checkpoint metadata")
    meta = json.loads(str(arrays.pop(_META_KEY)))
    if meta.get('format_version') != FORMAT_VERSION:
        raise ConfigError('checkpoint', f"unsupported format version {meta.get('format_version')}")

    for key, shape in meta.get('shapes', {}).items():
        if key not in arrays or list(arrays[key].shape) != shape:
            raise DataFormatError(f"{path}: array '{key}' missing or not of shape {shape}")
    return arrays, meta
