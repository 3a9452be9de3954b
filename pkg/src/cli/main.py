"""
src/cli/main.py - Entry Point & Routing

Main entry point for the CLI. Contains:
- Argument parser setup (train | eval | diagnose | hist)
- Config layering (config.yaml <- experiment.yaml <- flags <- OODSD_OUTPUT_ROOT)
- Thread pinning before numpy is imported
- Signal handling and exit codes

Exit codes:
    0  success
    1  other failure (including a run stopped by SIGINT/SIGTERM)
    2  configuration or data error (field path / file named in the message)
    3  numerical failure (dump written to <out>/tmp/numerical_failure.json)

Debug relevance: When CLI args aren't parsed correctly
"""

import argparse
import os
import signal
import sys
import threading
from pathlib import Path

import yaml

from src.config import load_layered_config
from src.exceptions import ConfigError, DataError, NumericalError, OODError

from .utils import _debug_log, _log, pin_threads

PROJECT_ROOT = Path(__file__).resolve().parents[2]
DEFAULT_CONFIG = PROJECT_ROOT / 'config.yaml'

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

# Thread-safe shutdown event for signal handling
#
# SHUTDOWN COORDINATION:
# - When SIGTERM/SIGINT is received, _shutdown_event is set
# - The training loop checks it at every step boundary, writes
#   checkpoints/latest.npz and returns 'interrupted'
_shutdown_event = threading.Event()


def _signal_handler(signum, frame):
    """Handle SIGTERM and SIGINT for graceful shutdown."""
    signame = 'SIGTERM' if signum == signal.SIGTERM else 'SIGINT'
    print(f"\nReceived {signame}, stopping at the next step boundary...")
    _shutdown_event.set()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ood-cli.py",
        description="Self-distillation OOD detector with negative sampling",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    # Train the smoke experiment
    python ood-cli.py train --config experiments/smoke/experiment.yaml

    # Continue an interrupted run
    python ood-cli.py train --config experiments/smoke/experiment.yaml --resume

    # Score in-dist test + OOD sets against the training feature bank
    python ood-cli.py eval --config experiments/smoke/experiment.yaml --svg

    # Occupied soft-classes + k-NN accuracy over several checkpoints
    python ood-cli.py diagnose --config experiments/smoke/experiment.yaml \\
        --checkpoint out/smoke/checkpoints/epoch_0001.npz \\
        --checkpoint out/smoke/checkpoints/epoch_0002.npz

    # Colour-histogram distance between two configured datasets
    python ood-cli.py hist --config experiments/rot-aux/experiment.yaml --a in_dist --b auxiliary
        """
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None,
                        help="Experiment YAML (overrides config.yaml defaults)")
    common.add_argument("--defaults", type=str, default=str(DEFAULT_CONFIG),
                        help="Global defaults YAML (default: project config.yaml)")
    common.add_argument("--seed", type=int, default=None, help="Override the experiment seed")
    common.add_argument("--out", type=str, default=None, help="Override the output directory")
    common.add_argument("--svg", action="store_true", help="Also render SVG figures into reports/")

    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", parents=[common], help="Train student/teacher")
    p_train.add_argument("--resume", action="store_true",
                         help="Continue from <out>/checkpoints/latest.npz")

    p_eval = sub.add_parser("eval", parents=[common], help="Score datasets, write AUROC report")
    p_eval.add_argument("--checkpoint", type=str, default=None,
                        help="Checkpoint to evaluate (default: <out>/checkpoints/latest.npz)")

    p_diag = sub.add_parser("diagnose", parents=[common], help="Occupied soft-classes and k-NN accuracy")
    p_diag.add_argument("--checkpoint", type=str, action="append", default=None,
                        help="Checkpoint to diagnose (repeatable; default: latest)")

    p_hist = sub.add_parser("hist", parents=[common], help="Colour histograms of two datasets")
    p_hist.add_argument("--a", dest="dataset_a", type=str, default="in_dist", help="First dataset name")
    p_hist.add_argument("--b", dest="dataset_b", type=str, default=None,
                        help="Second dataset name (default: auxiliary, else first OOD set)")
    p_hist.add_argument("--bins", type=int, default=32, help="Bins per channel (default: 32)")

    return parser


def resolve_raw_config(args) -> dict:
    """Merge defaults, experiment file, flags and the output-root env var."""
    if args.config and not Path(args.config).exists():
        raise ConfigError('--config', f"file not found: {args.config}")
    raw = load_layered_config(args.defaults, args.config)
    if not isinstance(raw, dict):
        raise ConfigError('config', "top level must be a mapping")
    if args.seed is not None:
        raw['seed'] = args.seed
    raw.setdefault('name', Path(args.config).parent.name if args.config else 'default')
    if args.out:
        raw['output'] = args.out
    raw.setdefault('output', str(Path('out') / str(raw['name'])))

    root = os.environ.get('OODSD_OUTPUT_ROOT')
    if root and not Path(raw['output']).is_absolute():
        raw['output'] = str(Path(root) / raw['output'])
    return raw


def main(argv=None) -> int:
    """Main entry point for the CLI.

    Returns:
        Exit code (see module docstring)
    """
    args = build_parser().parse_args(argv)

    signal.signal(signal.SIGTERM, _signal_handler)
    signal.signal(signal.SIGINT, _signal_handler)

    try:
        raw = resolve_raw_config(args)
        runtime = raw.get('runtime') if isinstance(raw.get('runtime'), dict) else {}
        pin_threads(runtime.get('single_threaded', True) is not False)

        # numpy is first imported here, after the thread env vars are set
        from . import commands
        _debug_log('CLI', 'START', f"{args.command} config={args.config} out={raw['output']}")
        return commands.dispatch(args, raw, _shutdown_event)

    except yaml.YAMLError as e:
        _log(f"❌ Config error: invalid YAML: {e}")
        return EXIT_CONFIG
    except ConfigError as e:
        _log(f"❌ Config error: {e}")
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        _log(f"❌ Data error: {e}")
        return EXIT_CONFIG
    except NumericalError as e:
        _log(f"❌ Numerical failure: {e}")
        return EXIT_NUMERICAL
    except OODError as e:
        _log(f"❌ {type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
