"""
src/cli/utils.py - Logging & Runtime Helpers

Small helpers with no numpy dependency (safe to import before thread pinning):
- Logging utilities (_log, _debug_log)
- BLAS/OpenMP thread pinning for bitwise-deterministic runs
- Run resource summary (psutil)

Debug relevance: When a run's terminal output and debug log disagree
"""

import os
import time
from datetime import datetime
from pathlib import Path

import psutil

THREAD_ENV_VARS = (
    'OMP_NUM_THREADS',
    'OPENBLAS_NUM_THREADS',
    'MKL_NUM_THREADS',
    'VECLIB_MAXIMUM_THREADS',
    'NUMEXPR_NUM_THREADS',
)


def _log(message: str) -> None:
    """Print with optional debug ID prefix for log correlation."""
    debug_id = os.environ.get('DEBUG_ID', '')
    prefix = f"[{debug_id}] " if debug_id else ""
    print(f"{prefix}{message}", flush=True)


def _debug_log(source: str, event: str, message: str) -> None:
    """Write to debug log file with timestamp and source.

    Creates a single log file per debug ID at:
    <out>/tmp/debug/<DEBUG_ID>.log

    Args:
        source: Origin of the log (CLI, TRAIN, EVAL, ...)
        event: Event type (START, STEP, CKPT, FAIL, ...)
        message: Log message
    """
    debug_id = os.environ.get('DEBUG_ID')
    if not debug_id:
        return

    out_dir = os.environ.get('OODSD_RUN_DIR')
    if not out_dir:
        return

    debug_dir = Path(out_dir) / 'tmp' / 'debug'
    debug_dir.mkdir(parents=True, exist_ok=True)

    log_file = debug_dir / f"{debug_id}.log"
    timestamp = datetime.now().strftime('%H:%M:%S.%f')[:-3]

    with open(log_file, 'a', encoding='utf-8') as f:
        f.write(f"[{timestamp}] [{source}:{event}] {message}\n")


def pin_threads(single_threaded: bool) -> None:
    """Force one BLAS/OpenMP thread; must run before numpy is first imported."""
    if not single_threaded:
        return
    for var in THREAD_ENV_VARS:
        os.environ[var] = '1'


class ResourceMonitor:
    """Peak RSS and CPU seconds of this process since construction."""

    def __init__(self):
        self.process = psutil.Process()
        self.started = time.time()
        cpu = self.process.cpu_times()
        self._cpu0 = cpu.user + cpu.system

    def summary(self) -> dict:
        cpu = self.process.cpu_times()
        mem = self.process.memory_info()
        # peak_wset is Windows-only; elsewhere this is the current RSS
        peak = getattr(mem, 'peak_wset', None) or mem.rss
        return {
            'wall_seconds': round(time.time() - self.started, 2),
            'cpu_seconds': round(cpu.user + cpu.system - self._cpu0, 2),
            'rss_mb': round(peak / (1024 * 1024), 1),
            'threads': self.process.num_threads(),
        }
