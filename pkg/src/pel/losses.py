"""Training losses, class priors, zero-shot prediction, and the shot-split
evaluation protocol.

The adjusted loss shifts logits by log class priors before the softmax, which
turns the model's uniform-target posterior into the long-tailed source-domain
posterior; under a uniform prior it reduces exactly to cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NumericGuardError
from .tensor import Tensor

MANY_SHOT_MIN = 101  # many: n > 100
FEW_SHOT_MAX = 19  # few: n < 20
SPLIT_KEYS = ("overall", "many", "medium", "few")


@dataclass(frozen=True)
class ClassPrior:
    counts: np.ndarray  # per-class training sample counts
    probs: np.ndarray
    log_probs: np.ndarray

    @property
    def class_count(self) -> int:
        return len(self.counts)

    @staticmethod
    def uniform(class_count: int) -> "ClassPrior":
        counts = np.ones(class_count, dtype=np.int64)
        probs = counts / counts.sum()
        return ClassPrior(counts, probs, np.log(probs))

    @staticmethod
    def from_counts(counts) -> "ClassPrior":
        counts = np.asarray(counts, dtype=np.int64)
        if np.any(counts < 1):
            k = int(np.argmin(counts))
            raise ValueError(f"class {k} has zero training samples (enable smoothing to allow)")
        probs = counts / counts.sum()
        return ClassPrior(counts, probs, np.log(probs))


def estimate_prior(labels, class_count: int, smoothing: bool = False) -> ClassPrior:
    """Empirical class frequencies of the training labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ValueError(f"labels outside [0, {class_count})")
    counts = np.bincount(labels, minlength=class_count).astype(np.int64)
    if smoothing and np.any(counts == 0):
        counts = counts + 1
    return ClassPrior.from_counts(counts)


@dataclass(frozen=True)
class ShotSplits:
    many: frozenset[int]  # n > 100
    medium: frozenset[int]  # 20 <= n <= 100
    few: frozenset[int]  # n < 20

    @staticmethod
    def from_counts(counts) -> "ShotSplits":
        counts = np.asarray(counts)
        return ShotSplits(
            many=frozenset(np.flatnonzero(counts > 100).tolist()),
            medium=frozenset(np.flatnonzero((counts >= 20) & (counts <= 100)).tolist()),
            few=frozenset(np.flatnonzero(counts < 20).tolist()),
        )


def _nll(z_adj: Tensor, y) -> Tensor:
    logp = T.log_softmax(z_adj, axis=-1)
    y_arr = np.asarray(y, dtype=np.int64)
    if logp.ndim == 1:
        picked = T.gather_rows(logp, y_arr.reshape(()))
        return T.scale(picked, -1.0)
    picked = T.gather_rows(logp, y_arr.reshape(-1))
    return T.scale(T.mean(picked), -1.0)


def la_loss(z: Tensor, y, prior: ClassPrior) -> Tensor:
    """Negative log of softmax(z + log prior) at the true class.

    Accepts a single (K,) logit vector with an int label or a (B, K) batch
    with a label vector (batch losses are averaged). A uniform prior shifts
    every logit by the same constant, which is the identity on the loss, so
    it is skipped to keep the cross-entropy equivalence bit-exact.
    """
    if np.all(prior.log_probs == prior.log_probs[0]):
        return _nll(z, y)
    shift = Tensor(prior.log_probs.astype(z.data.dtype))
    return _nll(T.add(z, shift), y)


def ce_loss(z: Tensor, y) -> Tensor:
    """Plain cross entropy from logits."""
    return _nll(z, y)


def source_posterior(z: Tensor, prior: ClassPrior) -> Tensor:
    """softmax(z + log prior): the source-domain probability model."""
    shift = Tensor(prior.log_probs.astype(z.data.dtype))
    return T.softmax(T.add(z, shift), axis=-1)


def zero_shot_predict(image_features, text_features):
    """argmax cosine similarity against per-class text features.

    Ties break to the lowest class index. Accepts one feature vector or a
    batch of rows; returns an int or an int array accordingly.
    """
    f = np.asarray(image_features, dtype=np.float64)
    t = np.asarray(text_features, dtype=np.float64)
    single = f.ndim == 1
    if single:
        f = f[None]
    f_norms = np.linalg.norm(f, axis=1)
    t_norms = np.linalg.norm(t, axis=1)
    if np.any(f_norms == 0):
        raise NumericGuardError("zero-norm image feature in cosine comparison")
    if np.any(t_norms == 0):
        k = int(np.argmin(t_norms))
        raise NumericGuardError(f"zero-norm text feature for class {k}")
    sims = (f / f_norms[:, None]) @ (t / t_norms[:, None]).T
    preds = np.argmax(sims, axis=1).astype(np.int64)
    return int(preds[0]) if single else preds


def accuracy_by_split(predictions, labels, splits: ShotSplits) -> dict[str, float | None]:
    """Accuracy overall and over samples whose true class is many/medium/few.

    Splits with no test samples are reported as None (absent), not zero.
    """
    preds = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"predictions/labels length mismatch: {preds.shape} vs {labels.shape}")
    correct = preds == labels
    out: dict[str, float | None] = {"overall": float(correct.mean()) if labels.size else None}
    for key, classes in (("many", splits.many), ("medium", splits.medium), ("few", splits.few)):
        mask = np.isin(labels, list(classes))
        out[key] = float(correct[mask].mean()) if mask.any() else None
    return out


def train_test_gap(train_acc: dict, test_acc: dict) -> dict[str, float | None]:
    """Per-split train minus test accuracy (None where a split is absent)."""
    gaps: dict[str, float | None] = {}
    for key in SPLIT_KEYS:
        tr, te = train_acc.get(key), test_acc.get(key)
        gaps[key] = None if tr is None or te is None else tr - te
    return gaps
