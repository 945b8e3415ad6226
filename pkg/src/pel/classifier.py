"""Classification heads and their initialization strategies.

Three head kinds over a feature vector f:

- linear:        z_k = w_k . f + b_k
- l2_normalized: z_k = (w_k / |w_k|) . f
- cosine:        z_k = sigma * cos(w_k, f)

Initializers: random rows, imported per-class text features (stored raw; the
cosine head normalizes at use), class-mean features, or a short linear probe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .archive import load_archive, save_archive
from .backbone import BackboneParams, ForwardHooks, ViTConfig, extract_feature
from .errors import ArchiveError, ConfigError, NumericGuardError, ShapeError
from .rng import RngStream
from .tensor import Tensor

KINDS = ("linear", "l2_normalized", "cosine")
DEFAULT_SIGMA = 25.0
RANDOM_INIT_STD = 0.02


@dataclass
class ClassifierParams:
    W: Tensor  # (K, feature_dim), row k is class k's weight vector
    b: Tensor | None
    kind: str = "cosine"
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown classifier kind {self.kind!r}")
        if self.W.ndim != 2 or self.W.shape[0] < 2:
            raise ConfigError(f"classifier W must be (K >= 2, feature_dim), got {self.W.shape}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.kind == "linear" and self.b is None:
            self.b = Tensor(np.zeros(self.class_count, dtype=self.W.data.dtype), requires_grad=True)

    @property
    def class_count(self) -> int:
        return self.W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1]

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        params = [("classifier.w", self.W)]
        if self.kind == "linear" and self.b is not None:
            params.append(("classifier.b", self.b))
        return params

    def to_entries(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.trainable_params()}


def logits(f, params: ClassifierParams) -> Tensor:
    """Class scores for one feature vector (K,) or a batch (B, K)."""
    if not isinstance(f, Tensor):
        f = Tensor(np.asarray(f, dtype=params.W.data.dtype))
    single = f.ndim == 1
    f2 = T.reshape(f, (1, f.shape[0])) if single else f
    if f2.shape[-1] != params.feature_dim:
        raise ShapeError(f"feature dim {f2.shape[-1]} != classifier dim {params.feature_dim}")

    if params.kind == "linear":
        z = T.add(T.matmul(f2, T.swapaxes(params.W, 0, 1)), params.b)
    else:
        w_norms = np.linalg.norm(params.W.data, axis=1)
        if np.any(w_norms == 0):
            k = int(np.argmin(w_norms))
            raise NumericGuardError(f"zero-norm classifier row for class {k}")
        norms = T.reshape(T.l2_norm(params.W, axis=1), (params.class_count, 1))
        w_unit = T.div(params.W, norms)
        if params.kind == "cosine":
            f_norms = np.linalg.norm(f2.data, axis=-1)
            if np.any(f_norms == 0):
                raise NumericGuardError("zero-norm feature in cosine head")
            f_unit = T.div(f2, T.reshape(T.l2_norm(f2, axis=-1), f2.shape[:-1] + (1,)))
            z = T.scale(T.matmul(f_unit, T.swapaxes(w_unit, 0, 1)), params.sigma)
        else:
            z = T.matmul(f2, T.swapaxes(w_unit, 0, 1))
    return T.reshape(z, (params.class_count,)) if single else z


def init_random(class_count: int, feature_dim: int, rng: RngStream,
                kind: str = "cosine", sigma: float = DEFAULT_SIGMA) -> ClassifierParams:
    W = Tensor(rng.normal((class_count, feature_dim), RANDOM_INIT_STD), requires_grad=True)
    return ClassifierParams(W=W, b=None, kind=kind, sigma=sigma)


# -- text-feature archives ----------------------------------------------------


def save_text_features(features: np.ndarray, path) -> None:
    """Write per-class feature rows as text_emb.<k> entries."""
    features = np.asarray(features, dtype=np.float32)
    entries = {f"text_emb.{k}": features[k] for k in range(features.shape[0])}
    entries["meta.class_count"] = np.int64(features.shape[0])
    save_archive(entries, path)


def load_text_features(path) -> np.ndarray:
    entries = load_archive(path)
    if "meta.class_count" not in entries:
        raise ArchiveError(f"{path}: missing meta.class_count")
    count = int(np.ravel(entries["meta.class_count"])[0])
    rows = []
    dim = None
    for k in range(count):
        key = f"text_emb.{k}"
        if key not in entries:
            raise ArchiveError(f"{path}: missing text feature for class {k}")
        row = entries[key]
        if row.ndim != 1:
            raise ArchiveError(f"{path}: text_emb.{k} must be a vector, got shape {row.shape}")
        if dim is None:
            dim = row.shape[0]
        elif row.shape[0] != dim:
            raise ArchiveError(f"{path}: text_emb.{k} has dim {row.shape[0]}, expected {dim}")
        rows.append(row)
    return np.stack(rows)


def init_semantic(text_archive_path, feature_dim: int | None = None,
                  kind: str = "cosine", sigma: float = DEFAULT_SIGMA) -> ClassifierParams:
    """Classifier rows = imported text features, verbatim (no renormalization)."""
    W = load_text_features(text_archive_path)
    if feature_dim is not None and W.shape[1] != feature_dim:
        raise ShapeError(f"text features have dim {W.shape[1]}, backbone features have {feature_dim}")
    return ClassifierParams(W=Tensor(W.astype(np.float32), requires_grad=True), b=None, kind=kind, sigma=sigma)


# -- feature-based initializers ----------------------------------------------


def _features_for(dataset, backbone: BackboneParams, config: ViTConfig,
                  hooks: ForwardHooks | None, batch_size: int = 128) -> np.ndarray:
    images = dataset.normalized_images()
    feats = []
    with T.no_grad():
        for start in range(0, images.shape[0], batch_size):
            feats.append(extract_feature(images[start : start + batch_size], backbone, config, hooks).data)
    return np.concatenate(feats, axis=0)


def init_class_mean(dataset, backbone: BackboneParams, config: ViTConfig,
                    hooks: ForwardHooks | None = None, kind: str = "cosine",
                    sigma: float = DEFAULT_SIGMA) -> ClassifierParams:
    """Row k = mean extracted feature of class-k training samples."""
    labels = dataset.labels
    feats = _features_for(dataset, backbone, config, hooks)
    rows = np.zeros((dataset.class_count, feats.shape[1]), dtype=np.float32)
    for k in range(dataset.class_count):
        mask = labels == k
        if not mask.any():
            raise ValueError(f"class {k} has no samples for class-mean initialization")
        rows[k] = feats[mask].mean(axis=0)
    return ClassifierParams(W=Tensor(rows, requires_grad=True), b=None, kind=kind, sigma=sigma)


def probe_features(features: np.ndarray, labels: np.ndarray, class_count: int,
                   probe_epochs: int = 5, lr: float = 0.01, rng: RngStream | None = None,
                   kind: str = "cosine", sigma: float = DEFAULT_SIGMA,
                   batch_size: int = 128) -> ClassifierParams:
    """Fit a head on fixed features with the trainer recipe (adjusted loss,
    SGD momentum 0.9, weight decay 5e-4 on W), starting from the random init.
    """
    from .losses import estimate_prior, la_loss

    rng = rng or RngStream(0)
    params = init_random(class_count, features.shape[1], rng, kind=kind, sigma=sigma)
    if probe_epochs == 0:
        return params
    prior = estimate_prior(labels, class_count)
    momentum, wd = 0.9, 5e-4
    velocity = {name: np.zeros_like(t.data) for name, t in params.trainable_params()}
    order_rng = rng.child(1)
    for _ in range(probe_epochs):
        order = order_rng.permutation(len(labels))
        for start in range(0, len(labels), batch_size):
            idx = order[start : start + batch_size]
            z = logits(Tensor(features[idx]), params)
            loss = la_loss(z, labels[idx], prior)
            T.backward(loss)
            for name, t in params.trainable_params():
                g = t.grad
                if g is None:
                    continue
                decay = wd if name == "classifier.w" else 0.0
                velocity[name] = momentum * velocity[name] + (g + decay * t.data)
                t.data = t.data - np.asarray(lr * velocity[name], dtype=t.data.dtype)
                t.grad = None
    return params


def init_linear_probe(dataset, backbone: BackboneParams, config: ViTConfig,
                      hooks: ForwardHooks | None = None, probe_epochs: int = 5,
                      lr: float = 0.01, rng: RngStream | None = None,
                      kind: str = "cosine", sigma: float = DEFAULT_SIGMA,
                      batch_size: int = 128) -> ClassifierParams:
    """Train the head alone on frozen backbone features as an initialization.

    probe_epochs=0 returns the random initialization unchanged.
    """
    feats = _features_for(dataset, backbone, config, hooks, batch_size=batch_size)
    return probe_features(feats, dataset.labels, dataset.class_count, probe_epochs,
                          lr, rng, kind, sigma, batch_size)


def weight_norms(params: ClassifierParams) -> np.ndarray:
    """Euclidean norm of each class row, in class order."""
    return np.linalg.norm(params.W.data, axis=1)
