#!/usr/bin/env python3
"""
ood-cli.py - Self-Distillation OOD Detector

Train a student/teacher pair with negative sampling, then score in-distribution
and OOD test sets against the training feature bank.

USAGE:
    python ood-cli.py train    --config experiments/smoke/experiment.yaml
    python ood-cli.py train    --config experiments/smoke/experiment.yaml --resume
    python ood-cli.py eval     --config experiments/smoke/experiment.yaml --svg
    python ood-cli.py diagnose --config experiments/smoke/experiment.yaml --checkpoint <ckpt> ...
    python ood-cli.py hist     --config experiments/rot-aux/experiment.yaml --a in_dist --b auxiliary

Output:
    Writes into <output>/ (default out/<experiment>/): config.echo,
    metrics.csv, summary.json, checkpoints/, reports/, tmp/
"""

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
