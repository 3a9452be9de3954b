"""
src/model.py - Student/Teacher Encoders, Projection Head, EMA Teacher

Network = Encoder (image batch -> feature f in R^d) + ProjectionHead
(f -> K soft-class logits g). The StudentTeacher pair holds two networks of
identical structure: the student is trained by gradient descent, the teacher
is an exponential moving average of the student and never records tape nodes.

ENCODERS:
    tiny_vit   patch embedding, learned positional embedding (bilinearly
               resampled for smaller views), pre-norm transformer blocks,
               mean-pooled final tokens
    mlp        resize to the global view size, flatten, GELU MLP

Parameters are created with a truncated normal (std 0.02) for affine
weights and zeros for biases; layer norms start at gain 1, bias 0.
"""

import copy
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import truncnorm

from src import tensor_core as tc
from src.augment import resize_bilinear
from src.exceptions import ConfigError, NumericalError, ParameterError
from src.tensor_core import Tensor


@dataclass
class ModelConfig:
    arch: str = 'tiny_vit'
    image_size: int = 32
    patch: int = 4
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    mlp_hidden: List[int] = field(default_factory=lambda: [256])
    out_dim: int = 256
    head_hidden: Optional[int] = None
    init_std: float = 0.02
    momentum: float = 0.996
    centering: bool = True
    center_momentum: float = 0.9


def trunc_normal(shape: Tuple[int, ...], rng: np.random.Generator, std: float = 0.02) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


# =============================================================================
# MODULES
# =============================================================================

class Module:
    """Minimal parameter container; parameters and children keep insertion order."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, 'Module'] = {}

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: 'Module') -> 'Module':
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = '') -> List[Tuple[str, Tensor]]:
        out = [(prefix + name, t) for name, t in self._params.items()]
        for name, module in self._children.items():
            out.extend(module.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise ConfigError('checkpoint', f"missing parameters {sorted(missing)[:5]}")
        for name, t in own.items():
            if state[name].shape != t.shape:
                raise ConfigError('checkpoint', f"parameter {name} has shape {state[name].shape}, expected {t.shape}")
            t.data = np.array(state[name], dtype=t.data.dtype)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        self.weight = self.param('weight', trunc_normal((in_features, out_features), rng, std))
        self.bias = self.param('bias', np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.add(tc.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = self.param('gamma', np.ones(dim))
        self.beta = self.param('beta', np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gamma, self.beta)


class Block(Module):
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator, std: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.norm1 = self.child('norm1', LayerNorm(dim))
        self.q = self.child('q', Linear(dim, dim, rng, std))
        self.k = self.child('k', Linear(dim, dim, rng, std))
        self.v = self.child('v', Linear(dim, dim, rng, std))
        self.proj = self.child('proj', Linear(dim, dim, rng, std))
        self.norm2 = self.child('norm2', LayerNorm(dim))
        self.fc1 = self.child('fc1', Linear(dim, dim * mlp_ratio, rng, std))
        self.fc2 = self.child('fc2', Linear(dim * mlp_ratio, dim, rng, std))

    def _split_heads(self, x: Tensor, batch: int, tokens: int) -> Tensor:
        return tc.transpose(tc.reshape(x, (batch, tokens, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        batch, tokens, dim = x.shape
        h = self.norm1(x)
        q = self._split_heads(self.q(h), batch, tokens)
        k = self._split_heads(self.k(h), batch, tokens)
        v = self._split_heads(self.v(h), batch, tokens)
        scores = tc.mul_scalar(tc.matmul(q, tc.transpose(k)), 1.0 / math.sqrt(self.head_dim))
        attn = tc.softmax_temp(scores, 1.0)
        o = tc.transpose(tc.matmul(attn, v), (0, 2, 1, 3))
        x = tc.add(x, self.proj(tc.reshape(o, (batch, tokens, dim))))
        h = self.norm2(x)
        return tc.add(x, self.fc2(tc.gelu(self.fc1(h))))


def _interp_weights(src: int, dst: int) -> np.ndarray:
    """(dst x src) 1-D bilinear weights with half-pixel centres."""
    w = np.zeros((dst, src))
    for i in range(dst):
        pos = min(max((i + 0.5) * src / dst - 0.5, 0.0), src - 1.0)
        i0 = int(math.floor(pos))
        frac = pos - i0
        i1 = min(i0 + 1, src - 1)
        w[i, i0] += 1.0 - frac
        w[i, i1] += frac
    return w


class TinyViT(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.patch = cfg.patch
        self.grid = cfg.image_size // cfg.patch
        self.dim = cfg.dim
        self.patch_embed = self.child('patch_embed', Linear(cfg.patch * cfg.patch * 3, cfg.dim, rng, cfg.init_std))
        self.pos_embed = self.param('pos_embed', trunc_normal((self.grid * self.grid, cfg.dim), rng, cfg.init_std))
        self.blocks = [self.child(f'blocks.{i}', Block(cfg.dim, cfg.heads, cfg.mlp_ratio, rng, cfg.init_std))
                       for i in range(cfg.depth)]
        self.norm = self.child('norm', LayerNorm(cfg.dim))
        self._pos_cache: Dict[int, Tensor] = {}

    @property
    def feature_dim(self) -> int:
        return self.dim

    def _positions(self, grid: int) -> Tensor:
        if grid == self.grid:
            return self.pos_embed
        if grid not in self._pos_cache:
            w = _interp_weights(self.grid, grid)
            self._pos_cache[grid] = Tensor(np.kron(w, w))
        return tc.matmul(self._pos_cache[grid], self.pos_embed)

    def patchify(self, x: np.ndarray) -> np.ndarray:
        batch, height, width, _ = x.shape
        p = self.patch
        if height % p or width % p or height != width:
            raise ParameterError(f"View size {height}x{width} is not a square multiple of patch {p}")
        g = height // p
        patches = x.reshape(batch, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5)
        return patches.reshape(batch, g * g, p * p * 3)

    def __call__(self, x: np.ndarray) -> Tensor:
        grid = x.shape[1] // self.patch
        tokens = self.patch_embed(Tensor(self.patchify(x)))
        tokens = tc.add(tokens, self._positions(grid))
        for block in self.blocks:
            tokens = block(tokens)
        return tc.mean(self.norm(tokens), axis=1)


class MLPEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.image_size = cfg.image_size
        sizes = [cfg.image_size * cfg.image_size * 3] + list(cfg.mlp_hidden) + [cfg.dim]
        self.layers = [self.child(f'layers.{i}', Linear(a, b, rng, cfg.init_std))
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.dim = cfg.dim

    @property
    def feature_dim(self) -> int:
        return self.dim

    def __call__(self, x: np.ndarray) -> Tensor:
        if x.shape[1] != self.image_size:
            x = np.stack([resize_bilinear(v, self.image_size) for v in x])
        h = Tensor(x.reshape(x.shape[0], -1))
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = tc.gelu(h)
        return h


class ProjectionHead(Module):
    """Two affine layers with GELU between: R^d -> R^hidden -> R^K."""

    def __init__(self, dim: int, out_dim: int, hidden: int, rng: np.random.Generator, std: float):
        super().__init__()
        self.fc1 = self.child('fc1', Linear(dim, hidden, rng, std))
        self.fc2 = self.child('fc2', Linear(hidden, out_dim, rng, std))

    def __call__(self, f: Tensor) -> Tensor:
        return self.fc2(tc.gelu(self.fc1(f)))


class Network(Module):
    def __init__(self, encoder: Module, head: ProjectionHead):
        super().__init__()
        self.encoder = self.child('encoder', encoder)
        self.head = self.child('head', head)

    def forward(self, x: np.ndarray, step: int = None) -> Tuple[Tensor, Tensor]:
        """
        Args:
            x: (B, S, S, 3) normalized view batch
            step: training step for error context

        Returns:
            (f, g): features (B, d) and logits (B, K)
        """
        try:
            f = self.encoder(x)
            g = self.head(f)
        except NumericalError as e:
            raise e.with_context(step=step, view_size=int(x.shape[1]), batch=int(x.shape[0]))
        return f, g

    def features(self, x: np.ndarray) -> np.ndarray:
        with tc.no_grad():
            return self.encoder(x).data


def build_network(cfg: ModelConfig, rng: np.random.Generator) -> Network:
    if cfg.arch == 'tiny_vit':
        encoder = TinyViT(cfg, rng)
    elif cfg.arch == 'mlp':
        encoder = MLPEncoder(cfg, rng)
    else:
        raise ConfigError('model.arch', f"unknown architecture '{cfg.arch}'")
    hidden = cfg.head_hidden or 2 * cfg.dim
    head = ProjectionHead(cfg.dim, cfg.out_dim, hidden, rng, cfg.init_std)
    return Network(encoder, head)


# =============================================================================
# STUDENT / TEACHER
# =============================================================================

def teacher_probs(logits: np.ndarray, tau_t: float, center: np.ndarray = None,
                  tau_s: float = None) -> np.ndarray:
    """
    softmax((g_t - c) / tau_t) as a constant array (no tape participation).

    Raises:
        ConfigError: tau_t >= tau_s when tau_s is given
        ParameterError: tau_t <= 0
    """
    if tau_s is not None and tau_t >= tau_s:
        raise ConfigError('loss.tau_t', f"teacher temperature {tau_t} must be below student temperature {tau_s}")
    shifted = logits if center is None else logits - center
    with tc.no_grad():
        return tc.softmax_temp(Tensor(shifted), tau_t).data


class StudentTeacher:
    """Paired networks; the teacher starts as an exact copy of the student."""

    def __init__(self, student: Network, momentum: float = 0.996, centering: bool = True,
                 center_momentum: float = 0.9):
        if not 0.0 <= momentum <= 1.0:
            raise ParameterError(f"teacher momentum must be in [0, 1], got {momentum}")
        self.student = student
        self.teacher = copy.deepcopy(student)
        for t in self.teacher.parameters():
            t.requires_grad = False
            t.grad = None
        self.momentum = momentum
        self.centering = centering
        self.center_momentum = center_momentum
        out_dim = student.head.fc2.bias.shape[0]
        self.center = np.zeros(out_dim, dtype=tc.get_default_dtype())

    @classmethod
    def from_config(cls, cfg: ModelConfig, rng: np.random.Generator) -> 'StudentTeacher':
        return cls(build_network(cfg, rng), momentum=cfg.momentum, centering=cfg.centering,
                   center_momentum=cfg.center_momentum)

    def teacher_forward(self, x: np.ndarray, step: int = None) -> Tuple[np.ndarray, np.ndarray]:
        with tc.no_grad():
            f, g = self.teacher.forward(x, step=step)
        return f.data, g.data

    def teacher_probs(self, g_t: np.ndarray, tau_t: float, tau_s: float = None) -> np.ndarray:
        return teacher_probs(g_t, tau_t, self.center if self.centering else None, tau_s)

    def ema_update(self, m: float = None) -> None:
        """p_t <- m * p_t + (1 - m) * p_s for every parameter pair."""
        m = self.momentum if m is None else m
        if not 0.0 <= m <= 1.0:
            raise ParameterError(f"EMA momentum must be in [0, 1], got {m}")
        for p_s, p_t in zip(self.student.parameters(), self.teacher.parameters()):
            p_t.data = m * p_t.data + (1.0 - m) * p_s.data

    def update_center(self, g_t: np.ndarray) -> None:
        if not self.centering:
            return
        batch_mean = g_t.mean(axis=0)
        self.center = self.center_momentum * self.center + (1.0 - self.center_momentum) * batch_mean

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"student.{k}": v for k, v in self.student.state_dict().items()}
        state.update({f"teacher.{k}": v for k, v in self.teacher.state_dict().items()})
        state['center'] = self.center.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.student.load_state_dict({k[len('student.'):]: v for k, v in state.items() if k.startswith('student.')})
        self.teacher.load_state_dict({k[len('teacher.'):]: v for k, v in state.items() if k.startswith('teacher.')})
        self.center = np.array(state['center'], dtype=self.center.dtype)
