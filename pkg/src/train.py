"""
src/train.py - Self-Distillation Losses, Optimizer, Schedules and Training Loop

One optimization step:

    1. positive views per sample   (2 global + 8 local, stream 'positive')
    2. negative views per sample   (shift R, then 1 global + 8 local, stream 'negative')
    3. teacher forward on globals  -> centered, sharpened probs (constants)
    4. student forward on all views, softmax at tau_s
    5. L_total = L_pos + sum_member lambda_member * L_neg[member]
    6. backward -> clip global grad norm -> AdamW (decoupled weight decay)
    7. EMA teacher update -> center update

Steps 6-7 run strictly in that order; only step 1-2 may be spread over worker
threads (views depend only on per-sample seeds, never on worker count).

LOSSES (summed over views and pairs, averaged over the batch):
    loss_pos   -sum_{g in G} sum_{v in V, v != g} sum_i p_t^i(g) log p_s^i(v)
    loss_neg   -(1/K) sum_{v in V_neg} sum_i log p_s^i(v)
    loss_total loss_pos + lambda * loss_neg  (or per-member weights when combined)

SCHEDULES:
    lr     base_lr * batch / 256, linear warmup from 0, cosine to min_lr
    wd     cosine from weight_decay to weight_decay_end
    tau_t  linear from tau_t_start to tau_t_end inside EVERY epoch
"""

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src import tensor_core as tc
from src.augment import MultiCropConfig, ViewSet, make_views, sample_rng
from src.checkpoint import load_checkpoint, save_checkpoint
from src.exceptions import ConfigError, DimensionError, NumericalError, ParameterError, UsageError
from src.model import StudentTeacher
from src.negatives import NegativeSource, ShiftTransform, sample_negative_views
from src.tensor_core import Tape, Tensor


@dataclass
class LossConfig:
    lambda_neg: float = 1.0
    lambda_in: float = 0.5
    lambda_aux: float = 0.5
    tau_s: float = 0.1
    tau_t_start: float = 0.055
    tau_t_end: float = 0.01
    eps: float = tc.LOG_EPS

    def weights(self, source: NegativeSource) -> Dict[str, float]:
        """Per-member negative loss weights."""
        if source.kind == 'combined':
            return {'in_dist': self.lambda_in, 'auxiliary': self.lambda_aux}
        return {source.kind: self.lambda_neg}


@dataclass
class OptimConfig:
    base_lr: float = 0.004
    min_lr: float = 1e-6
    warmup_epochs: int = 2
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_grad: float = 3.0


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    log_every: int = 10
    checkpoint_every: int = 5


# =============================================================================
# LOSSES
# =============================================================================

def loss_pos(p_t: np.ndarray, p_s_global: Tensor, p_s_local: Optional[Tensor] = None,
             eps: float = tc.LOG_EPS) -> Tensor:
    """
    Cross-entropy between teacher global views and every other student view.

    Args:
        p_t: (G, B, K) teacher probabilities, treated as constants
        p_s_global: (G, B, K) student probabilities on the same global views
        p_s_local: (L, B, K) student probabilities on local views, or None

    Raises:
        DimensionError: shapes or K disagree
    """
    p_t = np.asarray(p_t)
    if p_t.ndim != 3 or p_s_global.shape != p_t.shape:
        raise DimensionError(f"loss_pos: teacher {p_t.shape} vs student globals {p_s_global.shape}")
    if p_s_local is not None and (p_s_local.ndim != 3 or p_s_local.shape[1:] != p_t.shape[1:]):
        raise DimensionError(f"loss_pos: student locals {p_s_local.shape} do not match {p_t.shape}")

    batch = p_t.shape[1]
    teacher_sum = Tensor(p_t.sum(axis=0))
    log_g = tc.log_clamped(p_s_global, eps)

    # sum over all (g, v) pairs, then remove the g == v diagonal
    cross = tc.sum(tc.mul(teacher_sum, tc.sum(log_g, axis=0)))
    if p_s_local is not None:
        log_l = tc.log_clamped(p_s_local, eps)
        cross = tc.add(cross, tc.sum(tc.mul(teacher_sum, tc.sum(log_l, axis=0))))
    diagonal = tc.sum(tc.mul(Tensor(p_t), log_g))
    return tc.mul_scalar(tc.sub(diagonal, cross), 1.0 / batch)


def loss_neg(p_s_neg: Union[Tensor, Sequence[Tensor]], eps: float = tc.LOG_EPS) -> Tensor:
    """
    Uniform-target cross-entropy summed over negative views.

    Each tensor is (V, B, K), or (V, K) for a single sample.
    """
    parts = [p_s_neg] if isinstance(p_s_neg, Tensor) else list(p_s_neg)
    if not parts:
        raise UsageError("loss_neg needs at least one negative view tensor")
    k = parts[0].shape[-1]
    total = None
    for p in parts:
        if p.shape[-1] != k:
            raise DimensionError(f"loss_neg: mixed class counts {p.shape[-1]} and {k}")
        batch = p.shape[-2] if p.ndim >= 3 else 1
        term = tc.mul_scalar(tc.sum(tc.log_clamped(p, eps)), -1.0 / (k * batch))
        total = term if total is None else tc.add(total, term)
    return total


def loss_total(lp, ln=None, lam: Union[float, Mapping[str, float]] = 1.0):
    """
    lp + lambda * ln. ln may be a mapping {member: loss} with lam a mapping of weights.

    A zero weight drops its term entirely, so lambda = 0 returns lp itself.
    """
    if ln is None:
        return lp
    if isinstance(ln, Mapping):
        weights = lam if isinstance(lam, Mapping) else {member: lam for member in ln}
        terms = [(weights.get(member, 0.0), value) for member, value in ln.items()]
    else:
        terms = [(lam, ln)]

    total = lp
    for w, value in terms:
        if w < 0:
            raise ParameterError(f"negative loss weight must be >= 0, got {w}")
        if w == 0:
            continue
        weighted = tc.mul_scalar(value, w) if isinstance(value, Tensor) else w * value
        if isinstance(total, Tensor):
            total = tc.add(total, weighted)
        elif isinstance(weighted, Tensor):
            total = tc.add(weighted, total)
        else:
            total = total + weighted
    return total


# =============================================================================
# OPTIMIZER
# =============================================================================

class AdamW:
    """Adam moments with decoupled weight decay; 1-D parameters are not decayed."""

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float, weight_decay: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            data = p.data
            if p.ndim > 1 and weight_decay:
                data = data - lr * weight_decay * data
            data = data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(data)):
                raise NumericalError(f"Non-finite parameter after update: {name}", {'op': 'adamw', 'param': name})
            p.data = data

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {'opt.t': np.array(self.t)}
        for name, _ in self.params:
            state[f'opt.m.{name}'] = self.m[name]
            state[f'opt.v.{name}'] = self.v[name]
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.t = int(state['opt.t'])
        for name, p in self.params:
            self.m[name] = np.array(state[f'opt.m.{name}'], dtype=p.data.dtype)
            self.v[name] = np.array(state[f'opt.v.{name}'], dtype=p.data.dtype)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most max_norm; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = math.sqrt(float(np.sum([np.sum(g * g) for g in grads])))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# =============================================================================
# SCHEDULES
# =============================================================================

def cosine_schedule(base: float, final: float, epochs: int, steps_per_epoch: int,
                    warmup_epochs: int = 0, start_warmup: float = 0.0) -> np.ndarray:
    """Per-step values: linear warmup, then cosine from base to final (reached on the last step)."""
    total = epochs * steps_per_epoch
    warmup_iters = min(warmup_epochs * steps_per_epoch, total)
    warmup = np.linspace(start_warmup, base, warmup_iters, endpoint=False) if warmup_iters else np.array([])
    n = total - warmup_iters
    iters = np.arange(n)
    cosine = final + 0.5 * (base - final) * (1.0 + np.cos(np.pi * iters / max(n - 1, 1)))
    return np.concatenate((warmup, cosine))


@dataclass
class Schedules:
    lr: np.ndarray
    weight_decay: np.ndarray
    steps_per_epoch: int
    tau_t_start: float
    tau_t_end: float

    @classmethod
    def build(cls, optim: OptimConfig, loss: LossConfig, epochs: int, steps_per_epoch: int,
              batch_size: int) -> 'Schedules':
        peak = optim.base_lr * batch_size / 256.0
        lr = cosine_schedule(peak, optim.min_lr, epochs, steps_per_epoch, optim.warmup_epochs)
        wd = cosine_schedule(optim.weight_decay, optim.weight_decay_end, epochs, steps_per_epoch)
        return cls(lr, wd, steps_per_epoch, loss.tau_t_start, loss.tau_t_end)

    def tau_t(self, iteration: int) -> float:
        frac = iteration / max(self.steps_per_epoch - 1, 1)
        return self.tau_t_start + (self.tau_t_end - self.tau_t_start) * frac

    def at(self, epoch: int, iteration: int) -> Tuple[float, float, float]:
        """(lr, weight_decay, tau_t) for one step."""
        step = epoch * self.steps_per_epoch + iteration
        if step >= len(self.lr):
            raise ParameterError(f"step {step} is beyond the schedule of {len(self.lr)} steps")
        return float(self.lr[step]), float(self.weight_decay[step]), self.tau_t(iteration)


# =============================================================================
# TRAINER
# =============================================================================

@dataclass
class PreparedBatch:
    """Stacked views of one batch: arrays are (views, batch, S, S, 3)."""
    indices: List[int]
    globals: np.ndarray
    locals: Optional[np.ndarray]
    negatives: Dict[str, Tuple[np.ndarray, Optional[np.ndarray]]] = field(default_factory=dict)


@dataclass
class StepLosses:
    loss_pos: Tensor
    loss_neg: Dict[str, Tensor]
    loss_total: Tensor
    teacher_logits: np.ndarray


def _stack_views(view_sets: Sequence[ViewSet]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    globals_ = np.stack([np.stack(vs.globals) for vs in view_sets], axis=1)
    locals_ = None
    if view_sets[0].locals:
        locals_ = np.stack([np.stack(vs.locals) for vs in view_sets], axis=1)
    return globals_, locals_


def _flat(views: np.ndarray) -> np.ndarray:
    return views.reshape((-1,) + views.shape[2:])


class Trainer:
    """
    Drives optimization of a StudentTeacher on an in-memory image array.

    Usage:
        trainer = Trainer(st, images, seed=0, views=MultiCropConfig(), ...)
        trainer.on_progress = callback       # ('step', record) / ('epoch_complete', epoch, records) / ...
        status = trainer.run()
    """

    def __init__(self, st: StudentTeacher, images: np.ndarray, seed: int,
                 views: MultiCropConfig = None, loss: LossConfig = None,
                 optim: OptimConfig = None, train: TrainConfig = None,
                 source: NegativeSource = None, shift: Sequence[ShiftTransform] = None,
                 neg_n_local: int = 8, auxiliary: np.ndarray = None, workers: int = 1,
                 checkpoint_dir=None, config_hash: str = None,
                 stop_event: threading.Event = None):
        if len(images) == 0:
            raise UsageError("Trainer needs at least one training image")
        self.st = st
        self.images = images
        self.seed = int(seed)
        self.views = views or MultiCropConfig()
        self.loss_cfg = loss or LossConfig()
        self.optim_cfg = optim or OptimConfig()
        self.train_cfg = train or TrainConfig()
        self.source = source or NegativeSource()
        self.shift = list(shift) if shift is not None else [ShiftTransform('rot90')]
        self.neg_n_local = neg_n_local
        self.auxiliary = auxiliary
        self.workers = max(1, int(workers))
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.config_hash = config_hash
        self.stop_event = stop_event or threading.Event()
        self.on_progress: Optional[Callable] = None

        self.batch_size = min(self.train_cfg.batch_size, len(images))
        self.steps_per_epoch = max(1, len(images) // self.batch_size)
        self.weights = {m: w for m, w in self.loss_cfg.weights(self.source).items()}
        self.use_negatives = any(w > 0 for w in self.weights.values())

        self.optimizer = AdamW(st.student.named_parameters(), self.optim_cfg.betas, self.optim_cfg.eps)
        self.schedules = Schedules.build(self.optim_cfg, self.loss_cfg, self.train_cfg.epochs,
                                         self.steps_per_epoch, self.batch_size)
        self.global_step = 0
        self.history: List[dict] = []
        self._pool: Optional[ThreadPoolExecutor] = None

    # -------------------------------------------------------------------------
    # Batches
    # -------------------------------------------------------------------------

    def batch_indices(self, epoch: int, iteration: int) -> List[int]:
        order = sample_rng(self.seed, epoch, 0, 'shuffle').permutation(len(self.images))
        start = iteration * self.batch_size
        return [int(i) for i in order[start:start + self.batch_size]]

    def _sample_views(self, idx: int, epoch: int):
        img = self.images[idx]
        positive = make_views(img, self.views, sample_rng(self.seed, epoch, idx, 'positive'))
        negative = {}
        if self.use_negatives:
            rng = sample_rng(self.seed, epoch, idx, 'negative')
            negative = sample_negative_views([img], self.source, self.shift, self.views, [rng],
                                             auxiliary=self.auxiliary, n_global=1,
                                             n_local=self.neg_n_local)
        return positive, negative

    def pool(self) -> ThreadPoolExecutor:
        """View-generation pool, created on first use and reused until close()."""
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix='views')
        return self._pool

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def prepare_batch(self, indices: Sequence[int], epoch: int) -> PreparedBatch:
        if self.workers > 1:
            sampled = list(self.pool().map(lambda i: self._sample_views(i, epoch), indices))
        else:
            sampled = [self._sample_views(i, epoch) for i in indices]

        globals_, locals_ = _stack_views([pos for pos, _ in sampled])
        prepared = PreparedBatch(list(indices), globals_, locals_)
        if self.use_negatives:
            for member in self.source.members:
                if self.weights.get(member, 0.0) > 0:
                    prepared.negatives[member] = _stack_views([neg[member][0] for _, neg in sampled])
        return prepared

    # -------------------------------------------------------------------------
    # Losses
    # -------------------------------------------------------------------------

    def _student_probs(self, views: np.ndarray, step: int) -> Tensor:
        n_views, batch = views.shape[:2]
        _, logits = self.st.student.forward(_flat(views), step=step)
        probs = tc.softmax_temp(logits, self.loss_cfg.tau_s)
        return tc.reshape(probs, (n_views, batch, probs.shape[-1]))

    def compute_losses(self, prepared: PreparedBatch, tau_t: float, step: int = None) -> StepLosses:
        """Forward passes and losses for a prepared batch; call inside a Tape to differentiate."""
        n_global, batch = prepared.globals.shape[:2]
        _, g_t = self.st.teacher_forward(_flat(prepared.globals), step=step)
        p_t = self.st.teacher_probs(g_t, tau_t, self.loss_cfg.tau_s).reshape(n_global, batch, -1)

        p_sg = self._student_probs(prepared.globals, step)
        p_sl = self._student_probs(prepared.locals, step) if prepared.locals is not None else None
        lp = loss_pos(p_t, p_sg, p_sl, self.loss_cfg.eps)

        negatives = {}
        for member, (neg_g, neg_l) in prepared.negatives.items():
            parts = [self._student_probs(neg_g, step)]
            if neg_l is not None:
                parts.append(self._student_probs(neg_l, step))
            negatives[member] = loss_neg(parts, self.loss_cfg.eps)

        total = loss_total(lp, negatives or None, self.weights)
        return StepLosses(lp, negatives, total, g_t)

    # -------------------------------------------------------------------------
    # Step / loop
    # -------------------------------------------------------------------------

    def step(self, epoch: int, iteration: int) -> dict:
        """One full iteration; returns {loss_pos, loss_neg, loss_total, lr, tau_t}."""
        indices = self.batch_indices(epoch, iteration)
        lr, wd, tau_t = self.schedules.at(epoch, iteration)
        try:
            prepared = self.prepare_batch(indices, epoch)
            with Tape():
                losses = self.compute_losses(prepared, tau_t, step=self.global_step)
            self.optimizer.zero_grad()
            tc.backward(losses.loss_total)
            clip_grad_norm(self.st.student.parameters(), self.optim_cfg.clip_grad)
            self.optimizer.step(lr, wd)
            self.st.ema_update()
            self.st.update_center(losses.teacher_logits)
        except NumericalError as e:
            raise e.with_context(
                step=self.global_step, epoch=epoch, iteration=iteration,
                batch_indices=indices,
                sample_seeds=[[self.seed, epoch, i] for i in indices],
                last_metrics=self.history[-1] if self.history else None,
            )

        loss_neg_value = float(sum(v.item() for v in losses.loss_neg.values()))
        return {
            'loss_pos': losses.loss_pos.item(),
            'loss_neg': loss_neg_value,
            'loss_total': losses.loss_total.item(),
            'lr': lr,
            'tau_t': tau_t,
        }

    def run(self, start_epoch: int = 0, start_iteration: int = 0) -> str:
        """
        Train from (start_epoch, start_iteration) to the configured end.

        Returns:
            'complete', or 'interrupted' when stop_event was set (a checkpoint
            of the next step to run is written first)
        """
        epochs = self.train_cfg.epochs
        self.global_step = start_epoch * self.steps_per_epoch + start_iteration
        try:
            for epoch in range(start_epoch, epochs):
                records = []
                first = start_iteration if epoch == start_epoch else 0
                for iteration in range(first, self.steps_per_epoch):
                    if self.stop_event.is_set():
                        path = self.save_latest(epoch, iteration)
                        if path:
                            self._progress('checkpoint', path, epoch, self.global_step)
                        return 'interrupted'
                    metrics = self.step(epoch, iteration)
                    record = {'step': self.global_step, 'epoch': epoch, **metrics}
                    self.history.append(record)
                    records.append(record)
                    self.global_step += 1
                    self._progress('step', record)

                self._progress('epoch_complete', epoch, records)
                last = epoch == epochs - 1
                if self.checkpoint_dir and (last or (epoch + 1) % max(1, self.train_cfg.checkpoint_every) == 0):
                    path = self.save(self.checkpoint_dir / f"epoch_{epoch + 1:04d}.npz", epoch + 1, 0)
                    self._progress('checkpoint', path, epoch + 1, self.global_step)
                    self.save_latest(epoch + 1, 0)
            return 'complete'
        finally:
            self.close()

    def _progress(self, event_type: str, *args):
        if self.on_progress:
            self.on_progress(event_type, *args)

    # -------------------------------------------------------------------------
    # Checkpoints
    # -------------------------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = self.st.state_dict()
        state.update(self.optimizer.state_dict())
        return state

    def save(self, path, epoch: int, iteration: int) -> Path:
        meta = {
            'epoch': epoch,
            'iteration': iteration,
            'step': epoch * self.steps_per_epoch + iteration,
            'seed': self.seed,
            'config_hash': self.config_hash,
            'rng': self.rng_state(epoch),
        }
        return save_checkpoint(path, self.state_dict(), meta)

    def rng_state(self, epoch: int) -> dict:
        """
        Bit-generator state of the batch-order stream of epoch.

        Every other stream (views, negatives) is derived from (seed, epoch,
        sample index), so this state pins the whole random sequence of a resume.
        """
        return sample_rng(self.seed, epoch, 0, 'shuffle').bit_generator.state

    def save_latest(self, epoch: int, iteration: int) -> Optional[Path]:
        if not self.checkpoint_dir:
            return None
        return self.save(self.checkpoint_dir / 'latest.npz', epoch, iteration)

    def load(self, path) -> Tuple[int, int]:
        """Restore model + optimizer; returns (epoch, iteration) to resume from."""
        state, meta = load_checkpoint(path)
        saved = meta.get('rng')
        if saved is not None and saved != self.rng_state(int(meta['epoch'])):
            raise ConfigError('seed', f"checkpoint {path} was written with seed {meta.get('seed')}, "
                                      f"this run uses {self.seed}")
        self.st.load_state_dict(state)
        self.optimizer.load_state_dict(state)
        self.global_step = int(meta['step'])
        return int(meta['epoch']), int(meta['iteration'])
