#!/usr/bin/env python3
"""
Artifact Manager - Run Output Storage

Owns the fixed output layout of one run directory. Every writer in the CLI
goes through here so tests can assert paths.

Storage structure:
    <out>/
    ├── config.echo                 # effective config (YAML)
    ├── metrics.csv                 # one row per optimization step
    ├── summary.json                # run summary (train / eval / diagnose sections)
    ├── checkpoints/
    │   ├── epoch_0005.npz
    │   └── latest.npz
    ├── reports/
    │   ├── auroc.csv               # one row per OOD set
    │   ├── scores_<dataset>.csv    # sample_id, dataset, score
    │   ├── hist_scores.csv         # shared-edge score histograms
    │   ├── occupied.csv            # per soft-class mean probability + mask
    │   ├── scatter.csv             # one row per diagnosed checkpoint
    │   ├── hist_colors.csv         # per-channel colour histograms
    │   └── *.svg                   # optional figures
    └── tmp/                        # 🔒 lock file, failure dumps, debug logs
        └── debug/

CSV files are UTF-8 with a header row; JSON is indented and key-sorted so
reruns are byte-identical.

Usage:
    from src.artifact_manager import ArtifactManager

    am = ArtifactManager(out_dir)
    am.prepare(config_hash)
    am.append_metrics(record)
    am.write_json('summary.json', summary, section='train')
"""

import csv
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence

from src.checkpoint import load_checkpoint
from src.config import backup_stale, save_yaml

METRICS_HEADER = ['step', 'epoch', 'loss_pos', 'loss_neg', 'loss_total', 'lr', 'tau_t']


class ArtifactManager:
    """Paths and writers for one run directory."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.checkpoints_dir = self.out_dir / 'checkpoints'
        self.reports_dir = self.out_dir / 'reports'
        self.tmp_dir = self.out_dir / 'tmp'
        self.metrics_path = self.out_dir / 'metrics.csv'
        self.summary_path = self.out_dir / 'summary.json'
        self.echo_path = self.out_dir / 'config.echo'

    def prepare(self, config_hash: str = None) -> None:
        """
        Create the layout. Checkpoints written by a different configuration
        are backed up to *_NNNN.bak before this run may overwrite them.
        """
        for d in (self.out_dir, self.checkpoints_dir, self.reports_dir, self.tmp_dir):
            d.mkdir(parents=True, exist_ok=True)
        if config_hash is None:
            return
        for ckpt in sorted(self.checkpoints_dir.glob('*.npz')):
            previous = self.checkpoint_hash(ckpt)
            if previous is not None and previous != config_hash:
                backup_stale(self.checkpoints_dir, ckpt.name)

    @staticmethod
    def checkpoint_hash(path: Path) -> Optional[str]:
        try:
            _, meta = load_checkpoint(path)
        except Exception:
            return None
        return meta.get('config_hash')

    # -------------------------------------------------------------------------
    # Writers
    # -------------------------------------------------------------------------

    def write_echo(self, config_dict: Dict) -> Path:
        save_yaml(self.echo_path, config_dict)
        return self.echo_path

    def reset_metrics(self, keep_before_step: int = None) -> None:
        """Start metrics.csv afresh, or keep only rows with step < keep_before_step (resume)."""
        rows = []
        if keep_before_step is not None and self.metrics_path.exists():
            with open(self.metrics_path, newline='', encoding='utf-8') as f:
                rows = [r for r in csv.DictReader(f) if int(r['step']) < keep_before_step]
        with open(self.metrics_path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=METRICS_HEADER)
            writer.writeheader()
            writer.writerows(rows)

    def append_metrics(self, record: Dict[str, Any]) -> None:
        with open(self.metrics_path, 'a', newline='', encoding='utf-8') as f:
            csv.DictWriter(f, fieldnames=METRICS_HEADER, extrasaction='ignore').writerow(
                {k: _fmt(record[k]) for k in METRICS_HEADER})

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        path = self.reports_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
        return path

    def write_json(self, name: str, data: Any, section: str = None, directory: Path = None) -> Path:
        """
        Write JSON. With section, data is merged under that key of an existing
        file so train/eval/diagnose can share summary.json.
        """
        path = (directory or self.out_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        if section is not None:
            existing = {}
            if path.exists():
                with open(path, encoding='utf-8') as f:
                    existing = json.load(f)
            existing[section] = data
            data = existing
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
            f.write('\n')
        return path

    def dump_failure(self, context: Dict[str, Any]) -> Path:
        """NumericalError dump: tmp/numerical_failure.json."""
        return self.write_json('numerical_failure.json', context, directory=self.tmp_dir)


def _fmt(value: Any) -> Any:
    """repr-exact floats so identical runs give identical CSV bytes."""
    if isinstance(value, float):
        return repr(value)
    return value


def _json_default(value: Any):
    if hasattr(value, 'tolist'):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
