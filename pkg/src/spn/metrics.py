"""Evaluation metrics: Top-K mono-semanticity scale, accuracy/F1,
image-normalised sequence MSE and concept purity."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, RangeError, ShapeError
from .prototypes import nearest_samples

DEGENERATE_VAR = 1e-12
DEFAULT_K = 5


def top_k_ms(pool, k: int = DEFAULT_K) -> float:
    """Top-K mono-semanticity scale of one prototype's activation pool.

    Mean deviation of the K largest activations from the pool mean, divided by
    the pool variance (mean with divisor n, variance with divisor n - 1).
    Pools with variance below 1e-12 score 0.
    """
    x = np.asarray(pool, dtype=np.float64).ravel()
    if k < 1:
        raise RangeError("K must be >= 1")
    if x.size < max(k, 2):
        raise RangeError(f"pool of {x.size} values is too small for K={k}")
    mean = x.sum() / x.size
    var = ((x - mean) ** 2).sum() / (x.size - 1)
    if var < DEGENERATE_VAR:
        return 0.0
    top = np.sort(x)[::-1][:k]
    return float((top - mean).sum() / k / var)


@dataclass
class TopKMSReport:
    k: int
    pool_size: int
    psi: list[float]
    mean: list[float]
    variance: list[float]
    top: list[list[tuple[int, int, float]]]  # per prototype: (sample id, modality, activation)

    @property
    def mean_psi(self) -> float:
        return float(np.mean(self.psi)) if self.psi else 0.0


def top_k_ms_report(activations, k: int = DEFAULT_K, sample_ids: Sequence[int] | None = None) -> TopKMSReport:
    """Per-prototype Top-K MS over an S x N x M activation tensor (pool = S*M)."""
    acts = np.asarray(activations, dtype=np.float64)
    if acts.ndim != 3:
        raise ShapeError("activations must be S x N x M")
    S, N, M = acts.shape
    psi, means, variances, tops = [], [], [], []
    for n in range(N):
        pool = acts[:, n, :].ravel()
        psi.append(top_k_ms(pool, k))
        mu = pool.sum() / pool.size
        means.append(float(mu))
        variances.append(float(((pool - mu) ** 2).sum() / (pool.size - 1)))
        tops.append(nearest_samples(n, acts, k, sample_ids).entries)
    return TopKMSReport(k, S * M, psi, means, variances, tops)


def classification_metrics(pred: Sequence[int], true: Sequence[int], n_classes: int) -> tuple[float, float]:
    """Accuracy and F1: positive-class (index 1) F1 for two classes, macro F1 otherwise."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.size == 0 or pred.shape != true.shape:
        raise ContractError("need equal-length, non-empty label lists")
    acc = float((pred == true).mean())

    def f1_for(c):
        tp = int(((pred == c) & (true == c)).sum())
        fp = int(((pred == c) & (true != c)).sum())
        fn = int(((pred != c) & (true == c)).sum())
        denom = 2 * tp + fp + fn
        return 0.0 if denom == 0 or tp == 0 else 2.0 * tp / denom

    if n_classes == 2:
        return acc, f1_for(1)
    return acc, float(np.mean([f1_for(c) for c in range(n_classes)]))


def normalized_mse(pred, true, img_size) -> float:
    """MSE after scaling x/width coordinates by image width and y/height by
    image height. The last axis is 4 for bboxes (cx, cy, w, h) or 2 for joints."""
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {true.shape}")
    W, H = img_size
    if not (W > 0 and H > 0):
        raise ConfigError("img_size must be positive")
    if pred.shape[-1] == 4:
        scale = np.array([W, H, W, H], dtype=np.float64)
    elif pred.shape[-1] == 2:
        scale = np.array([W, H], dtype=np.float64)
    else:
        raise ShapeError(f"last dimension must be 4 or 2, got {pred.shape[-1]}")
    return float((((pred - true) / scale) ** 2).mean())


def concept_purity(sample_ids, labels: Mapping[int, Sequence[int]]) -> float:
    """Largest fraction of the given entries whose sample shares one concept.

    ``sample_ids`` is a list of ids or an ExplanationSet.
    """
    sample_ids = getattr(sample_ids, "sample_ids", sample_ids)
    if len(sample_ids) == 0:
        raise ContractError("purity of an empty explanation")
    counts: Counter = Counter()
    for sid in sample_ids:
        if sid not in labels:
            raise ContractError(f"sample {sid} has no concept labels")
        counts.update(set(labels[sid]))
    return max(counts.values(), default=0) / len(sample_ids)


def concept_histogram(sample_ids: Sequence[int], labels: Mapping[int, Sequence[int]]) -> dict[int, int]:
    counts: Counter = Counter()
    for sid in sample_ids:
        counts.update(set(labels[sid]))
    return dict(sorted(counts.items()))


def shuffled_purity(tops: Sequence[Sequence[int]], labels: Mapping[int, Sequence[int]],
                    n_shuffles: int = 1000, seed: int = 0) -> float:
    """Mean purity of the given top-K id lists after randomly permuting which
    sample owns which concept labels."""
    ids = sorted(labels)
    label_list = [labels[i] for i in ids]
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_shuffles):
        perm = rng.permutation(len(ids))
        shuffled = {sid: label_list[p] for sid, p in zip(ids, perm)}
        total += float(np.mean([concept_purity(t, shuffled) for t in tops]))
    return total / n_shuffles


@dataclass
class EvalReport:
    accuracy: float
    f1: float
    traj_mse: float
    pose_mse: float
    mean_topk_ms: float
    purity: list[float] = field(default_factory=list)
    psi: list[float] = field(default_factory=list)
    baseline_traj_mse: float = 0.0
    baseline_pose_mse: float = 0.0
    n_samples: int = 0
    kept_prototypes: list[int] | None = None

    def __post_init__(self):
        if not (0.0 <= self.accuracy <= 1.0 and 0.0 <= self.f1 <= 1.0):
            raise ContractError("accuracy and F1 must lie in [0, 1]")
        if self.traj_mse < 0 or self.pose_mse < 0:
            raise ContractError("MSE must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)
