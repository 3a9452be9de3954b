"""
src/experiment_config.py - Typed, Validated Experiment Configuration

Turns the merged YAML mapping (config.yaml <- experiment.yaml <- CLI flags)
into dataclass blocks. Everything is checked before any compute starts:

    - unknown keys        ConfigError("loss.tau_ss", "unknown field")
    - wrong types         ConfigError("train.epochs", "expected int, got str")
    - ranges              ConfigError("augment.flip_prob", "... must be in [0, 1] ...")
    - cross-field rules   tau_t_start/tau_t_end < tau_s, dim % heads == 0,
                          view sizes % patch == 0 (tiny_vit), auxiliary data
                          present when negatives need it

BLOCKS:
-------
    name, seed, output      top-level scalars
    data                    in_dist, in_test, auxiliary, ood_tests (DatasetSpec each)
    model                   src.model.ModelConfig (image_size comes from augment.global_size)
    augment                 view sizes, counts and photometric parameters
    negatives               source, shift chain, grid_n, max_frac, n_local
    loss                    src.train.LossConfig
    optim                   src.train.OptimConfig
    train                   src.train.TrainConfig
    eval                    score tau, k-NN k, bank subsample, histogram bins
    runtime                 workers, single_threaded, dtype

USAGE:
------
    from src.experiment_config import ExperimentConfig

    cfg = ExperimentConfig.from_dict(raw)
    echo = cfg.to_dict()
"""

import dataclasses
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from src.augment import IMAGENET_MEAN, IMAGENET_STD, MultiCropConfig, ViewFamilyConfig
from src.data import SOURCES as DATA_SOURCES, SYNTH_KINDS, DatasetSpec
from src.exceptions import ConfigError, OODError
from src.model import ModelConfig
from src.negatives import SOURCES as NEGATIVE_SOURCES, VARIANTS, NegativeSource, ShiftTransform
from src.train import LossConfig, OptimConfig, TrainConfig

DTYPES = ('float64', 'float32')
ARCHS = ('tiny_vit', 'mlp')


@dataclass
class DataConfig:
    in_dist: DatasetSpec = field(default_factory=lambda: DatasetSpec(name='in_dist', kind='stripes', n=256, seed=0))
    in_test: DatasetSpec = field(default_factory=lambda: DatasetSpec(name='in_test', kind='stripes', n=128, seed=1))
    auxiliary: Optional[DatasetSpec] = None
    ood_tests: List[DatasetSpec] = field(default_factory=list)


@dataclass
class AugmentConfig:
    global_size: int = 32
    local_size: int = 16
    n_global: int = 2
    n_local: int = 8
    global_scale: Tuple[float, float] = (0.4, 1.0)
    local_scale: Tuple[float, float] = (0.05, 0.4)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob_global1: float = 1.0
    blur_prob_global2: float = 0.1
    blur_prob_local: float = 0.5
    solarize_prob_global2: float = 0.2
    normalize_mean: Tuple[float, float, float] = IMAGENET_MEAN
    normalize_std: Tuple[float, float, float] = IMAGENET_STD

    def _family(self, scale, size, blur, solarize=0.0) -> ViewFamilyConfig:
        return ViewFamilyConfig(
            crop_scale_range=tuple(scale), output_size=size, flip_prob=self.flip_prob,
            jitter_prob=self.jitter_prob, brightness=self.brightness, contrast=self.contrast,
            saturation=self.saturation, hue=self.hue, grayscale_prob=self.grayscale_prob,
            blur_prob=blur, solarize_prob=solarize, normalize_mean=tuple(self.normalize_mean),
            normalize_std=tuple(self.normalize_std),
        )

    def multicrop(self) -> MultiCropConfig:
        return MultiCropConfig(
            local=self._family(self.local_scale, self.local_size, self.blur_prob_local),
            global1=self._family(self.global_scale, self.global_size, self.blur_prob_global1),
            global2=self._family(self.global_scale, self.global_size, self.blur_prob_global2,
                                 self.solarize_prob_global2),
            n_global=self.n_global,
            n_local=self.n_local,
        )


@dataclass
class NegativesConfig:
    source: str = 'auxiliary'
    shift: List[str] = field(default_factory=lambda: ['rot90'])
    grid_n: int = 2
    max_frac: float = 0.25
    n_local: int = 8

    def negative_source(self) -> NegativeSource:
        return NegativeSource(self.source)

    def shifts(self) -> List[ShiftTransform]:
        return [ShiftTransform(v, self.grid_n, self.max_frac) for v in self.shift]


@dataclass
class EvalConfig:
    score_tau: float = 0.04
    knn_k: int = 10
    bank_subsample: Optional[int] = None
    hist_bins: int = 30
    batch_size: int = 64


@dataclass
class RuntimeConfig:
    workers: int = 1
    single_threaded: bool = True
    dtype: str = 'float64'


_DERIVED = {'model': {'image_size'}}


# =============================================================================
# GENERIC BUILDER
# =============================================================================

def _coerce(value: Any, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, path)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(path, f"expected a list of {len(args)} values, got {value!r}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected int, got {type(value).__name__}")
        return value
    if hint is float:
        if isinstance(value, bool):
            raise ConfigError(path, "expected float, got bool")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            # YAML 1.1 reads 1e-6 as a string
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(path, f"expected float, got {value!r}")
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected str, got {type(value).__name__}")
        return value
    return value


def _build(cls, raw: Any, path: str):
    """Instantiate dataclass cls from a mapping, rejecting unknown keys by dotted path."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    derived = _DERIVED.get(path, set())
    for key in raw:
        if key in derived:
            raise ConfigError(f"{path}.{key}", "derived field, set it through augment.global_size")
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except OODError as e:
        raise ConfigError(path, str(e)) from e


def _dataset(raw: Any, path: str, name: str) -> DatasetSpec:
    if isinstance(raw, dict) and 'name' not in raw:
        raw = dict(raw, name=name)
    spec = _build(DatasetSpec, raw, path)
    if spec.source not in DATA_SOURCES:
        raise ConfigError(f"{path}.source", f"expected one of {DATA_SOURCES}, got '{spec.source}'")
    if spec.source == 'synthetic' and spec.kind not in SYNTH_KINDS:
        raise ConfigError(f"{path}.kind", f"expected one of {SYNTH_KINDS}, got '{spec.kind}'")
    if spec.source != 'synthetic' and not spec.path:
        raise ConfigError(f"{path}.path", f"source '{spec.source}' needs a path")
    if spec.n < 1:
        raise ConfigError(f"{path}.n", f"must be >= 1, got {spec.n}")
    return spec


# =============================================================================
# EXPERIMENT
# =============================================================================

@dataclass
class ExperimentConfig:
    name: str = 'experiment'
    seed: int = 0
    output: str = 'out'
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    negatives: NegativesConfig = field(default_factory=NegativesConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    @classmethod
    def from_dict(cls, raw: Dict) -> 'ExperimentConfig':
        raw = dict(raw or {})
        known = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown field")

        cfg = cls(
            name=_coerce(raw.get('name', 'experiment'), str, 'name'),
            seed=_coerce(raw.get('seed', 0), int, 'seed'),
            output=_coerce(raw.get('output', 'out'), str, 'output'),
            data=cls._build_data(raw.get('data')),
            model=_build(ModelConfig, raw.get('model'), 'model'),
            augment=_build(AugmentConfig, raw.get('augment'), 'augment'),
            negatives=_build(NegativesConfig, raw.get('negatives'), 'negatives'),
            loss=_build(LossConfig, raw.get('loss'), 'loss'),
            optim=_build(OptimConfig, raw.get('optim'), 'optim'),
            train=_build(TrainConfig, raw.get('train'), 'train'),
            eval=_build(EvalConfig, raw.get('eval'), 'eval'),
            runtime=_build(RuntimeConfig, raw.get('runtime'), 'runtime'),
        )
        cfg.model.image_size = cfg.augment.global_size
        cfg.validate()
        return cfg

    @staticmethod
    def _build_data(raw: Any) -> DataConfig:
        if raw is None:
            return DataConfig()
        if not isinstance(raw, dict):
            raise ConfigError('data', f"expected a mapping, got {type(raw).__name__}")
        for key in raw:
            if key not in ('in_dist', 'in_test', 'auxiliary', 'ood_tests'):
                raise ConfigError(f"data.{key}", "unknown field")
        defaults = DataConfig()
        data = DataConfig(
            in_dist=_dataset(raw['in_dist'], 'data.in_dist', 'in_dist') if 'in_dist' in raw else defaults.in_dist,
            in_test=_dataset(raw['in_test'], 'data.in_test', 'in_test') if 'in_test' in raw else defaults.in_test,
            auxiliary=_dataset(raw['auxiliary'], 'data.auxiliary', 'auxiliary') if raw.get('auxiliary') else None,
        )
        ood = raw.get('ood_tests') or []
        if not isinstance(ood, list):
            raise ConfigError('data.ood_tests', "expected a list of datasets")
        data.ood_tests = [_dataset(d, f"data.ood_tests[{i}]", f"ood_{i}") for i, d in enumerate(ood)]
        names = [d.name for d in data.ood_tests] + [data.in_test.name]
        if len(set(names)) != len(names):
            raise ConfigError('data.ood_tests', f"dataset names must be unique, got {names}")
        return data

    def validate(self) -> None:
        """Range and cross-field checks; raises ConfigError naming the field."""
        m, a, lo, op, tr, ev, rt, ng = (self.model, self.augment, self.loss, self.optim,
                                        self.train, self.eval, self.runtime, self.negatives)
        if m.arch not in ARCHS:
            raise ConfigError('model.arch', f"expected one of {ARCHS}, got '{m.arch}'")
        for name in ('dim', 'depth', 'heads', 'patch', 'mlp_ratio', 'out_dim'):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name}", f"must be >= 1, got {getattr(m, name)}")
        if m.out_dim < 2:
            raise ConfigError('model.out_dim', f"need K >= 2 soft-classes, got {m.out_dim}")
        if not 0.0 <= m.momentum <= 1.0:
            raise ConfigError('model.momentum', f"must be in [0, 1], got {m.momentum}")
        if not 0.0 <= m.center_momentum <= 1.0:
            raise ConfigError('model.center_momentum', f"must be in [0, 1], got {m.center_momentum}")
        if m.arch == 'tiny_vit':
            if m.dim % m.heads:
                raise ConfigError('model.heads', f"model.dim {m.dim} is not divisible by {m.heads} heads")
            for key in ('global_size', 'local_size'):
                if getattr(a, key) % m.patch:
                    raise ConfigError(f"augment.{key}", f"{getattr(a, key)} is not a multiple of model.patch {m.patch}")

        if a.n_global < 1:
            raise ConfigError('augment.n_global', f"must be >= 1, got {a.n_global}")
        if a.n_local < 0:
            raise ConfigError('augment.n_local', f"must be >= 0, got {a.n_local}")
        try:
            a.multicrop()
        except OODError as e:
            raise ConfigError('augment', str(e)) from e

        if lo.tau_s <= 0:
            raise ConfigError('loss.tau_s', f"must be > 0, got {lo.tau_s}")
        for key in ('tau_t_start', 'tau_t_end'):
            value = getattr(lo, key)
            if value <= 0:
                raise ConfigError(f"loss.{key}", f"must be > 0, got {value}")
            if value >= lo.tau_s:
                raise ConfigError(f"loss.{key}", f"teacher temperature {value} must be below loss.tau_s {lo.tau_s}")
        for key in ('lambda_neg', 'lambda_in', 'lambda_aux'):
            if getattr(lo, key) < 0:
                raise ConfigError(f"loss.{key}", f"must be >= 0, got {getattr(lo, key)}")
        if lo.eps <= 0:
            raise ConfigError('loss.eps', f"must be > 0, got {lo.eps}")

        if ng.source not in NEGATIVE_SOURCES:
            raise ConfigError('negatives.source', f"expected one of {NEGATIVE_SOURCES}, got '{ng.source}'")
        if not ng.shift:
            raise ConfigError('negatives.shift', "needs at least one variant (use identity for none)")
        for i, v in enumerate(ng.shift):
            if v not in VARIANTS:
                raise ConfigError(f"negatives.shift[{i}]", f"expected one of {VARIANTS}, got '{v}'")
        if ng.grid_n < 1:
            raise ConfigError('negatives.grid_n', f"must be >= 1, got {ng.grid_n}")
        if not 0.0 <= ng.max_frac < 1.0:
            raise ConfigError('negatives.max_frac', f"must be in [0, 1), got {ng.max_frac}")
        if ng.n_local < 0:
            raise ConfigError('negatives.n_local', f"must be >= 0, got {ng.n_local}")
        weights = lo.weights(ng.negative_source())
        if 'auxiliary' in weights and weights['auxiliary'] > 0 and self.data.auxiliary is None:
            raise ConfigError('data.auxiliary', f"negatives.source '{ng.source}' with a positive weight needs an auxiliary dataset")

        if op.base_lr <= 0:
            raise ConfigError('optim.base_lr', f"must be > 0, got {op.base_lr}")
        if op.min_lr < 0:
            raise ConfigError('optim.min_lr', f"must be >= 0, got {op.min_lr}")
        if op.warmup_epochs < 0 or op.warmup_epochs > tr.epochs:
            raise ConfigError('optim.warmup_epochs', f"must be in [0, train.epochs], got {op.warmup_epochs}")
        if not all(0.0 <= b < 1.0 for b in op.betas):
            raise ConfigError('optim.betas', f"must be in [0, 1), got {op.betas}")
        if op.clip_grad < 0:
            raise ConfigError('optim.clip_grad', f"must be >= 0, got {op.clip_grad}")

        for key in ('epochs', 'batch_size', 'log_every', 'checkpoint_every'):
            if getattr(tr, key) < 1:
                raise ConfigError(f"train.{key}", f"must be >= 1, got {getattr(tr, key)}")

        if ev.score_tau <= 0:
            raise ConfigError('eval.score_tau', f"must be > 0, got {ev.score_tau}")
        if ev.knn_k < 1:
            raise ConfigError('eval.knn_k', f"must be >= 1, got {ev.knn_k}")
        if ev.bank_subsample is not None and ev.bank_subsample < 1:
            raise ConfigError('eval.bank_subsample', f"must be >= 1, got {ev.bank_subsample}")
        if ev.hist_bins < 1 or ev.batch_size < 1:
            raise ConfigError('eval', "hist_bins and batch_size must be >= 1")

        if rt.workers < 1:
            raise ConfigError('runtime.workers', f"must be >= 1, got {rt.workers}")
        if rt.dtype not in DTYPES:
            raise ConfigError('runtime.dtype', f"expected one of {DTYPES}, got '{rt.dtype}'")

    def to_dict(self) -> Dict:
        """Effective config as plain YAML-safe data (tuples become lists)."""
        def plain(value):
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items()}
            if isinstance(value, (list, tuple)):
                return [plain(v) for v in value]
            return value

        out = plain(dataclasses.asdict(self))
        out['model'].pop('image_size', None)
        return out
