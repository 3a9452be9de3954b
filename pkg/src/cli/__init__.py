"""
src/cli - Command-line surface for training and evaluation.

Four subcommands share one layered config and one output layout:
  train     student/teacher optimization, metrics.csv, checkpoints
  eval      feature bank + anomaly scores + AUROC table
  diagnose  occupied soft-classes and k-NN accuracy per checkpoint
  hist      colour-histogram distance between two datasets

Usage:
    from src.cli import main
    sys.exit(main())

Or directly:
    python ood-cli.py train --config experiments/smoke/experiment.yaml
"""

def main(argv=None):
    from .main import main as _main
    return _main(argv)

__all__ = ['main']
