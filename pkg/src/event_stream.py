"""
EventStream: canonical event producer for training runs.

Wraps Trainer + lifecycle events (init, run_complete, error). The CLI is a
thin consumer of this stream:

    CLI:   stream.on_event = lambda e: print(TAG_MAP[e['type']](e['data']))

The EventStream normalizes all Trainer progress callbacks into typed event
dicts and adds lifecycle events that the Trainer doesn't emit natively.

Event catalog:
    init            - Run metadata (experiment, seed, epochs, steps_per_epoch, config_hash)
    step            - One optimization step finished (the metrics record)
    epoch_complete  - Epoch finished (epoch, mean loss_total, seconds)
    checkpoint      - Checkpoint written (path, epoch, step)
    run_complete    - Training finished or was stopped (status, steps)
    error           - Exception during training (message, type)
"""

import time
from pathlib import Path
from typing import Callable, Optional


class EventStream:
    """
    Canonical event producer for one training run.

    Usage:
        stream = EventStream(trainer, run_meta, lock_dir=artifacts.tmp_dir)
        stream.on_event = my_callback   # {type, data, ts}
        status = stream.run()
    """

    def __init__(self, trainer, run_meta: dict, lock_dir: str = None):
        """
        Args:
            trainer: src.train.Trainer (its progress callback is taken over)
            run_meta: Dict emitted with the init event
            lock_dir: Directory for the .lock file while training runs
        """
        self.trainer = trainer
        self.run_meta = run_meta
        self.on_event: Optional[Callable] = None
        self.trainer.on_progress = self._handle_progress
        self._epoch_started = time.time()
        self._lock_path = Path(lock_dir) / '.lock' if lock_dir else None

    def run(self, start_epoch: int = 0, start_iteration: int = 0) -> str:
        """
        Train and return the final status ('complete' or 'interrupted').

        Emits init → (step/epoch/checkpoint events) → run_complete.
        """
        try:
            self._acquire_lock()
            self._emit('init', self.run_meta)
            self._epoch_started = time.time()
            status = self.trainer.run(start_epoch, start_iteration)
            self._emit('run_complete', {'status': status, 'steps': self.trainer.global_step})
            return status
        except Exception as e:
            self._emit('error', {'message': str(e), 'type': type(e).__name__})
            raise
        finally:
            self._release_lock()

    def _handle_progress(self, event_type: str, *args):
        """Normalize Trainer callbacks into typed event dicts."""
        if event_type == 'step':
            self._emit('step', dict(args[0]))

        elif event_type == 'epoch_complete':
            epoch, records = args[0], args[1]
            losses = [r['loss_total'] for r in records]
            self._emit('epoch_complete', {
                'epoch': epoch,
                'steps': len(records),
                'mean_loss_total': sum(losses) / len(losses) if losses else None,
                'seconds': round(time.time() - self._epoch_started, 2),
            })
            self._epoch_started = time.time()

        elif event_type == 'checkpoint':
            path, epoch, step = args[0], args[1], args[2]
            self._emit('checkpoint', {'path': str(path), 'epoch': epoch, 'step': step})

    def _emit(self, event_type: str, data: dict):
        """Emit a typed event to the consumer callback."""
        if self.on_event:
            self.on_event({
                'type': event_type,
                'data': data,
                'ts': time.time(),
            })

    def _acquire_lock(self):
        if self._lock_path:
            self._lock_path.parent.mkdir(parents=True, exist_ok=True)
            self._lock_path.write_text(str(time.time()))

    def _release_lock(self):
        if self._lock_path and self._lock_path.exists():
            self._lock_path.unlink()
