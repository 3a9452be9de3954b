"""
src/ood_eval.py - Feature Bank Scoring, AUROC, k-NN Accuracy, Occupied Soft-Classes

Evaluation always runs the TEACHER on one deterministic view per image
(resize to the global size, normalize). Its backbone output f (before the
projection head) is what gets scored:

    S(x) = -(1/M) * sum_m exp(cos(f_x, f_m) / tau),   tau = 0.04

Higher S means more anomalous. Scores are float64 whatever the model dtype
(exp(1/0.04) ~ 7.2e10). The mean is taken in log space; a score beyond float64
raises NumericalError.

FUNCTIONS:
----------
    extract_features(network, images, image_size)  -> (N, d) float64
    build_bank(network, images, image_size, ...)    -> FeatureBank
    ood_score / ood_scores                          -> anomaly scores
    auroc(scores_out, scores_in)                    -> Mann-Whitney AUROC, ties = 1/2
    knn_accuracy(bank, feats, labels, k=10)         -> cosine k-NN accuracy
    soft_class_probs(st, images, image_size, tau)   -> (N, K) teacher probabilities
    occupied_classes(probs)                         -> OccupiedReport
    score_histograms(scores_by_dataset, bins)       -> shared-edge histograms
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from src.augment import IMAGENET_MEAN, IMAGENET_STD, eval_view, sample_rng
from src.exceptions import DataError, NumericalError, ParameterError, UsageError

DEFAULT_SCORE_TAU = 0.04
DEFAULT_K = 10


@dataclass
class FeatureBank:
    """M x d in-distribution features with precomputed unit rows."""
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None
    normalized: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) == 0:
            raise DataError(f"Feature bank needs a non-empty (M, d) matrix, got {self.features.shape}")
        norms = np.linalg.norm(self.features, axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            where = int(self.indices[zero[0]]) if self.indices is not None else int(zero[0])
            raise DataError(f"Zero-norm feature for sample {where}")
        self.normalized = self.features / norms[:, None]
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if len(self.labels) != len(self.features):
                raise DataError(f"{len(self.labels)} labels for {len(self.features)} bank features")

    def __len__(self) -> int:
        return len(self.features)


def extract_features(network, images: np.ndarray, image_size: int, batch_size: int = 64,
                     mean: Sequence[float] = IMAGENET_MEAN, std: Sequence[float] = IMAGENET_STD) -> np.ndarray:
    chunks = []
    for start in range(0, len(images), batch_size):
        views = np.stack([eval_view(img, image_size, mean, std) for img in images[start:start + batch_size]])
        chunks.append(network.features(views))
    return np.concatenate(chunks).astype(np.float64)


def build_bank(network, images: np.ndarray, image_size: int, labels: np.ndarray = None,
               subsample: int = None, seed: int = 0, batch_size: int = 64) -> FeatureBank:
    """Teacher features of the training images; optional seeded uniform subsample of the rows."""
    indices = np.arange(len(images))
    if subsample and subsample < len(images):
        indices = np.sort(sample_rng(seed, 0, 0, 'bank').choice(len(images), subsample, replace=False))
    features = extract_features(network, images[indices], image_size, batch_size)
    return FeatureBank(features, None if labels is None else np.asarray(labels)[indices], indices)


# =============================================================================
# SCORING
# =============================================================================

def _unit_rows(features: np.ndarray) -> np.ndarray:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    norms = np.linalg.norm(features, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DataError(f"Zero-norm test feature at index {int(zero[0])}")
    return features / norms[:, None]


def ood_scores(test_features: np.ndarray, bank: FeatureBank, tau: float = DEFAULT_SCORE_TAU,
               chunk: int = 256) -> np.ndarray:
    if tau <= 0:
        raise ParameterError(f"score temperature must be > 0, got {tau}")
    unit = _unit_rows(test_features)
    log_m = np.log(len(bank))
    out = np.empty(len(unit), dtype=np.float64)
    for start in range(0, len(unit), chunk):
        sims = unit[start:start + chunk] @ bank.normalized.T
        # log of the mean, exponentiated once
        out[start:start + chunk] = -np.exp(logsumexp(sims / tau, axis=1) - log_m)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise NumericalError(f"Score overflow at tau={tau} (sample {bad}); exp(1/tau) exceeds float64",
                             {'op': 'ood_scores', 'tau': tau, 'sample': bad})
    return out


def ood_score(f_test: np.ndarray, bank: FeatureBank, tau: float = DEFAULT_SCORE_TAU) -> float:
    return float(ood_scores(np.asarray(f_test).reshape(1, -1), bank, tau)[0])


def auroc(scores_out: Sequence[float], scores_in: Sequence[float]) -> float:
    """P(out > in) + 0.5 * P(out == in), via average ranks."""
    scores_out = np.asarray(scores_out, dtype=np.float64).ravel()
    scores_in = np.asarray(scores_in, dtype=np.float64).ravel()
    if scores_out.size == 0 or scores_in.size == 0:
        raise UsageError("auroc needs non-empty out and in score sequences")
    n_out, n_in = scores_out.size, scores_in.size
    ranks = rankdata(np.concatenate([scores_out, scores_in]))
    u = ranks[:n_out].sum() - n_out * (n_out + 1) / 2.0
    return float(u / (n_out * n_in))


# =============================================================================
# k-NN
# =============================================================================

def knn_predict(bank: FeatureBank, test_features: np.ndarray, k: int = DEFAULT_K) -> np.ndarray:
    """
    Majority vote of the k most cosine-similar bank rows.

    Vote ties go to the class with the larger summed similarity, then the
    smaller label.
    """
    if bank.labels is None:
        raise UsageError("k-NN needs a labelled feature bank")
    if not 1 <= k <= len(bank):
        raise ParameterError(f"k must be in [1, {len(bank)}], got {k}")
    unit = _unit_rows(test_features)
    sims = unit @ bank.normalized.T
    preds = np.empty(len(unit), dtype=bank.labels.dtype)
    for i, row in enumerate(sims):
        # stable: equal similarities keep bank order
        nearest = np.argsort(-row, kind='stable')[:k]
        votes: Dict = {}
        for j in nearest:
            label = bank.labels[j]
            count, total = votes.get(label, (0, 0.0))
            votes[label] = (count + 1, total + row[j])
        preds[i] = max(votes.items(), key=lambda kv: (kv[1][0], kv[1][1], -kv[0]))[0]
    return preds


def knn_accuracy(bank: FeatureBank, test_features: np.ndarray, test_labels: Sequence,
                 k: int = DEFAULT_K) -> float:
    preds = knn_predict(bank, test_features, k)
    return float(np.mean(preds == np.asarray(test_labels)))


# =============================================================================
# SOFT-CLASS OCCUPANCY
# =============================================================================

@dataclass
class OccupiedReport:
    count: int
    mask: np.ndarray
    means: np.ndarray


def soft_class_probs(st, images: np.ndarray, image_size: int, tau: float, batch_size: int = 64) -> np.ndarray:
    """Teacher soft-class probabilities (centered when centering is on) on evaluation views."""
    chunks = []
    for start in range(0, len(images), batch_size):
        views = np.stack([eval_view(img, image_size) for img in images[start:start + batch_size]])
        _, logits = st.teacher_forward(views)
        chunks.append(st.teacher_probs(logits, tau))
    return np.concatenate(chunks).astype(np.float64)


def occupied_classes(test_probs: np.ndarray) -> OccupiedReport:
    """Class i is occupied iff its mean probability over the set is strictly above 1/K."""
    probs = np.asarray(test_probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise UsageError(f"occupied_classes needs an (n, K) matrix, got {probs.shape}")
    means = probs.mean(axis=0)
    mask = means > 1.0 / probs.shape[1]
    return OccupiedReport(int(mask.sum()), mask, means)


# =============================================================================
# REPORTS
# =============================================================================

@dataclass
class ScoreReport:
    """Scores of the in-distribution test set and every OOD set."""
    in_dist: str
    scores: Dict[str, np.ndarray]
    tau: float = DEFAULT_SCORE_TAU

    def auroc_table(self) -> List[dict]:
        """One row per OOD set; in-dist vs itself is not a row."""
        base = self.scores[self.in_dist]
        rows = []
        for name, values in self.scores.items():
            if name == self.in_dist:
                continue
            rows.append({'dataset': name, 'n': int(len(values)), 'auroc': auroc(values, base)})
        return rows

    def mean_auroc(self) -> Optional[float]:
        rows = self.auroc_table()
        return float(np.mean([r['auroc'] for r in rows])) if rows else None

    def self_auroc(self, seed: int = 0) -> float:
        """In-dist test split in two random halves, scored against each other (~0.5)."""
        base = self.scores[self.in_dist]
        if len(base) < 2:
            raise UsageError("self_auroc needs at least two in-distribution scores")
        order = sample_rng(seed, 0, 1, 'eval').permutation(len(base))
        half = len(base) // 2
        return auroc(base[order[:half]], base[order[half:]])


def score_histograms(scores: Dict[str, np.ndarray], bins: int = 30) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Histograms of every dataset over one shared set of edges."""
    if bins < 1:
        raise ParameterError(f"bins must be >= 1, got {bins}")
    everything = np.concatenate([np.asarray(v, dtype=np.float64) for v in scores.values()])
    lo, hi = float(everything.min()), float(everything.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    return edges, {name: np.histogram(v, bins=edges)[0] for name, v in scores.items()}
