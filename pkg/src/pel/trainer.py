"""End-to-end orchestration: optimization recipe, training loop, evaluation
with optional test-time ensembling, checkpoints, parameter audit, and the
analysis report.

One process, single-worker data order: every random choice derives from the
run seed, so a config + seed pair reproduces its report bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .archive import load_archive, pack_json, save_archive, unpack_json
from .backbone import (
    BackboneParams,
    ViTConfig,
    VIT_B16,
    count_backbone_params,
    enumerate_backbone_params,
    extract_feature,
    load_backbone,
    set_trainable,
    trainable_backbone_tensors,
)
from .classifier import (
    ClassifierParams,
    init_class_mean,
    init_linear_probe,
    init_random,
    init_semantic,
    logits,
    weight_norms,
)
from .data import LabeledDataset, augment_train, preprocess_eval, shot_splits
from .errors import ArchiveError, ConfigError
from .losses import (
    ClassPrior,
    ShotSplits,
    accuracy_by_split,
    ce_loss,
    estimate_prior,
    la_loss,
    train_test_gap,
)
from .peft import (
    PeftConfig,
    PeftState,
    attach,
    count_peft_params,
    default_bottleneck_dim,
    enumerate_peft_params,
    learned_scales,
)
from .rng import RngStream
from .tensor import Tensor
from .tte import TteConfig, ensemble_logits


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 0.01
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "cosine"  # cosine | constant
    seed: int = 0
    backbone_mode: str = "frozen"  # frozen | full | partial
    partial_k: int | None = None
    peft: PeftConfig = field(default_factory=lambda: PeftConfig(variant="none"))
    classifier_kind: str = "cosine"
    classifier_sigma: float = 25.0
    classifier_init: str = "random"  # random | semantic | class_mean | linear_probe
    text_features_path: str | None = None
    loss: str = "la"  # la | ce
    tte: TteConfig = field(default_factory=TteConfig)
    augment: bool = True
    backbone_path: str | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.backbone_mode not in ("frozen", "full", "partial"):
            raise ConfigError(f"unknown backbone mode {self.backbone_mode!r}")
        if self.loss not in ("la", "ce"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.classifier_init not in ("random", "semantic", "class_mean", "linear_probe"):
            raise ConfigError(f"unknown classifier init {self.classifier_init!r}")
        if self.classifier_init == "semantic" and not self.text_features_path:
            raise ConfigError("semantic initialization requires text_features_path")

    def to_json(self) -> dict:
        doc = {
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "lr_schedule": self.lr_schedule,
            "seed": self.seed,
            "backbone_mode": self.backbone_mode,
            "partial_k": self.partial_k,
            "peft": self.peft.to_json(),
            "classifier_kind": self.classifier_kind,
            "classifier_sigma": self.classifier_sigma,
            "classifier_init": self.classifier_init,
            "text_features_path": self.text_features_path,
            "loss": self.loss,
            "tte": self.tte.to_json(),
            "augment": self.augment,
            "backbone_path": self.backbone_path,
        }
        return doc

    @staticmethod
    def from_json(doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if "peft" in doc:
            doc["peft"] = PeftConfig.from_json(doc["peft"])
        if "tte" in doc:
            doc["tte"] = TteConfig.from_json(doc["tte"])
        try:
            return TrainConfig(**doc)
        except TypeError as e:
            raise ConfigError(f"bad train config: {e}") from e


# -- optimizer ---------------------------------------------------------------


def decay_exempt(name: str) -> bool:
    """Weight decay skips layer-norm parameters, biases, and the adaptformer
    scalar; matrices (including prompts and classifier rows) are decayed."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf == "s" or leaf == "g" or leaf.startswith("b")


def sgd_step(named_params, momentum_state: dict, lr: float,
             momentum: float = 0.9, weight_decay: float = 5e-4) -> None:
    """One SGD-with-momentum update: v <- m v + (g + wd w); w <- w - lr v."""
    for name, t in named_params:
        if not t.requires_grad or t.grad is None:
            continue
        wd = 0.0 if decay_exempt(name) else weight_decay
        g = t.grad + wd * t.data if wd else t.grad
        v = momentum_state.get(name)
        v = g if v is None else momentum * v + g
        momentum_state[name] = v
        t.data = np.asarray(t.data - lr * v, dtype=t.data.dtype)


def schedule_lr(base_lr: float, epoch: int, total_epochs: int, kind: str) -> float:
    if kind == "constant" or total_epochs <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


# -- model assembly -----------------------------------------------------------


@dataclass
class ModelState:
    backbone: BackboneParams
    peft: PeftState
    classifier: ClassifierParams
    config: TrainConfig
    train_counts: np.ndarray
    final_train_accuracy: dict | None = None

    @property
    def vit(self) -> ViTConfig:
        return self.backbone.config

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        params = list(self.peft.trainable_params())
        seen = {id(t) for _, t in params}
        params += [(n, t) for n, t in self.classifier.trainable_params() if id(t) not in seen]
        for name, t in trainable_backbone_tensors(self.backbone):
            if id(t) not in seen:
                params.append((name, t))
                seen.add(id(t))
        return params

    def inventory(self) -> dict:
        per_tensor = {name: int(t.size) for name, t in self.trainable_params()}
        peft_total = self.peft.trainable_count()
        clf_total = sum(t.size for _, t in self.classifier.trainable_params())
        backbone_trainable = sum(
            t.size for n, t in trainable_backbone_tensors(self.backbone)
            if n not in self.peft.unfrozen_backbone
        )
        return {
            "tensors": per_tensor,
            "peft_total": int(peft_total),
            "classifier_total": int(clf_total),
            "backbone_trainable_total": int(backbone_trainable),
            "total_trainable": int(sum(per_tensor.values())),
            "backbone_total": enumerate_backbone_params(self.vit),
        }


def build_model(config: TrainConfig, train_dataset: LabeledDataset,
                backbone: BackboneParams) -> ModelState:
    """Wire backbone mode, tuning module, and classifier; validate dimensions."""
    vit = backbone.config
    if train_dataset.class_count < 2:
        raise ConfigError("training needs at least two classes")
    root = RngStream(config.seed)
    set_trainable(backbone, config.backbone_mode,
                  config.partial_k if config.backbone_mode == "partial" else None)
    state = attach(config.peft, backbone, root.child(1))

    kind, sigma = config.classifier_kind, config.classifier_sigma
    K, fd = train_dataset.class_count, vit.feature_dim
    if config.classifier_init == "random":
        clf = init_random(K, fd, root.child(2), kind=kind, sigma=sigma)
    elif config.classifier_init == "semantic":
        clf = init_semantic(config.text_features_path, feature_dim=fd, kind=kind, sigma=sigma)
        if clf.class_count != K:
            raise ConfigError(
                f"text archive has {clf.class_count} classes, dataset has {K}"
            )
    elif config.classifier_init == "class_mean":
        clf = init_class_mean(_resized(train_dataset, vit.image_size), backbone, vit,
                              hooks=state, kind=kind, sigma=sigma)
    else:
        clf = init_linear_probe(_resized(train_dataset, vit.image_size), backbone, vit,
                                hooks=state, rng=root.child(2), kind=kind, sigma=sigma)
    counts = train_dataset.per_class_counts
    return ModelState(backbone, state, clf, config, counts)


def _resized(dataset: LabeledDataset, input_size: int) -> LabeledDataset:
    """Dataset view with images bilinearly resized to the backbone input size."""
    if dataset.image_size == input_size:
        return dataset
    from .tte import bilinear_resize

    resized = np.stack([
        np.clip(bilinear_resize(img, input_size), 0, 255).astype(np.uint8)
        for img in dataset.images
    ])
    return LabeledDataset(resized, dataset.labels, dataset.class_names,
                          dataset.norm_mean, dataset.norm_std)


# -- training ------------------------------------------------------------------


def _batch_logits(model: ModelState, pixels: np.ndarray) -> Tensor:
    feats = extract_feature(pixels, model.backbone, model.vit, hooks=model.peft)
    return logits(feats, model.classifier)


def train(config: TrainConfig, train_dataset: LabeledDataset,
          backbone: BackboneParams, test_dataset: LabeledDataset | None = None) -> tuple[dict, ModelState]:
    """Run the optimization loop; returns (report, trained model state)."""
    vit = backbone.config
    model = build_model(config, train_dataset, backbone)
    prior = estimate_prior(train_dataset.labels, train_dataset.class_count)
    splits = shot_splits(train_dataset)
    loss_fn = (lambda z, y: la_loss(z, y, prior)) if config.loss == "la" else ce_loss

    root = RngStream(config.seed)
    params = model.trainable_params()
    momentum_state: dict[str, np.ndarray] = {}
    epochs_log: list[dict] = []
    n = len(train_dataset)

    for epoch in range(config.epochs):
        lr = schedule_lr(config.lr, epoch, config.epochs, config.lr_schedule)
        order = root.child(100 + epoch).permutation(n)
        aug_rng = root.child(200 + epoch)
        losses: list[float] = []
        epoch_preds = np.empty(n, dtype=np.int64)
        epoch_labels = np.empty(n, dtype=np.int64)
        pos = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            raw = train_dataset.images[idx]
            if config.augment:
                views = np.stack([
                    augment_train(img, aug_rng, out_size=vit.image_size) for img in raw
                ])
            else:
                views = np.stack([_fit(img, vit.image_size) for img in raw])
            batch = train_dataset.normalize(views)
            z = _batch_logits(model, batch)
            loss = loss_fn(z, train_dataset.labels[idx])
            T.backward(loss)
            sgd_step(params, momentum_state, lr, config.momentum, config.weight_decay)
            for _, t in params:
                t.grad = None
            losses.append(loss.item())
            epoch_preds[pos : pos + len(idx)] = np.argmax(z.data, axis=1)
            epoch_labels[pos : pos + len(idx)] = train_dataset.labels[idx]
            pos += len(idx)
        acc = accuracy_by_split(epoch_preds, epoch_labels, splits)
        epochs_log.append({"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                           "train_accuracy": acc})

    report: dict = {
        "config": config.to_json(),
        "epochs": epochs_log,
        "parameter_inventory": model.inventory(),
    }
    train_eval = evaluate_model(model, train_dataset, TteConfig.off(), splits)
    report["final_train_accuracy"] = train_eval["accuracy"]
    model.final_train_accuracy = train_eval["accuracy"]
    if test_dataset is not None:
        no_tte = evaluate_model(model, test_dataset, TteConfig.off(), splits)
        with_tte = evaluate_model(model, test_dataset, replace(config.tte, enabled=True), splits)
        report["test_accuracy"] = no_tte["accuracy"]
        report["test_accuracy_tte"] = with_tte["accuracy"]
        primary = with_tte["accuracy"] if config.tte.enabled else no_tte["accuracy"]
        report["train_test_gap"] = train_test_gap(train_eval["accuracy"], primary)
    report["analysis"] = analysis_payloads(model, train_dataset)
    return report, model


def _fit(image: np.ndarray, input_size: int) -> np.ndarray:
    from .tte import bilinear_resize

    if image.shape[-1] == input_size:
        return image.astype(np.float32)
    return bilinear_resize(image, input_size)


# -- evaluation ----------------------------------------------------------------


def predict(model: ModelState, dataset: LabeledDataset, tte_config: TteConfig,
            batch_size: int = 128) -> np.ndarray:
    """Per-image argmax class, TTE-averaged over the five crops when enabled."""
    vit = model.vit
    crops = [preprocess_eval(img, vit.image_size, tte_config) for img in dataset.images]
    n_views = len(crops[0])
    logit_sets = []
    with T.no_grad():
        for view in range(n_views):
            rows = []
            pixels = np.stack([c[view] for c in crops])
            for start in range(0, len(dataset), batch_size):
                batch = dataset.normalize(pixels[start : start + batch_size])
                rows.append(_batch_logits(model, batch).data)
            logit_sets.append(np.concatenate(rows, axis=0))
    if n_views == 1:
        final = logit_sets[0]
    else:
        final = np.stack([ensemble_logits([ls[i] for ls in logit_sets]) for i in range(len(dataset))])
    return np.argmax(final, axis=1).astype(np.int64)


def evaluate_model(model: ModelState, dataset: LabeledDataset, tte_config: TteConfig,
                   splits: ShotSplits | None = None) -> dict:
    if splits is None:
        splits = ShotSplits.from_counts(model.train_counts)
    if dataset.class_count != len(model.train_counts):
        raise ConfigError(
            f"dataset has {dataset.class_count} classes, model was trained with {len(model.train_counts)}"
        )
    preds = predict(model, dataset, tte_config)
    return {"accuracy": accuracy_by_split(preds, dataset.labels, splits),
            "predictions": preds}


# -- analysis -------------------------------------------------------------------


def cosine_matrix(rows: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of row vectors (zero rows stay zero)."""
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    unit = rows / norms
    return np.clip(unit @ unit.T, -1.0, 1.0)


def class_mean_similarity(model: ModelState, dataset: LabeledDataset,
                          batch_size: int = 128) -> np.ndarray:
    """K x K cosine similarity between class-mean features."""
    vit = model.vit
    ds = _resized(dataset, vit.image_size)
    feats = []
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            batch = ds.normalized_images(slice(start, start + batch_size))
            feats.append(extract_feature(batch, model.backbone, vit, hooks=model.peft).data)
    feats = np.concatenate(feats, axis=0).astype(np.float64)
    K = ds.class_count
    means = np.zeros((K, feats.shape[1]))
    for k in range(K):
        mask = ds.labels == k
        if mask.any():
            means[k] = feats[mask].mean(axis=0)
    return cosine_matrix(means)


def analysis_payloads(model: ModelState, dataset: LabeledDataset) -> dict:
    payloads = {
        "classifier_weight_norms": [float(x) for x in weight_norms(model.classifier)],
        "class_mean_similarity": [[float(v) for v in row]
                                  for row in class_mean_similarity(model, dataset)],
    }
    if model.config.peft.variant == "adaptformer":
        payloads["learned_scales"] = learned_scales(model.peft)
    return payloads


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(model: ModelState, path) -> None:
    entries = dict(model.peft.to_entries())
    entries.update(model.classifier.to_entries())
    meta = {
        "train_config": model.config.to_json(),
        "vit_config": model.vit.to_json(),
        "classifier_kind": model.classifier.kind,
        "classifier_sigma": model.classifier.sigma,
        "final_train_accuracy": model.final_train_accuracy,
    }
    entries["meta.config_json"] = pack_json(meta)
    entries["meta.train_counts"] = model.train_counts.astype(np.int64)
    save_archive(entries, path)


def load_checkpoint(path, backbone: BackboneParams | None = None) -> ModelState:
    entries = load_archive(path)
    for key in ("meta.config_json", "meta.train_counts"):
        if key not in entries:
            raise ArchiveError(f"{path}: checkpoint missing {key!r}")
    meta = unpack_json(entries["meta.config_json"])
    config = TrainConfig.from_json(meta["train_config"])
    vit = ViTConfig.from_json(meta["vit_config"])
    if backbone is None:
        if not config.backbone_path:
            raise ConfigError(f"{path}: checkpoint has no backbone_path; pass the backbone explicitly")
        backbone, _ = load_backbone(config.backbone_path)
    if backbone.config != vit:
        raise ConfigError(f"backbone config {backbone.config} != checkpoint's {vit}")

    set_trainable(backbone, config.backbone_mode,
                  config.partial_k if config.backbone_mode == "partial" else None)
    state = attach(config.peft, backbone, RngStream(config.seed).child(1))
    state.load_entries(entries)

    if "classifier.w" not in entries:
        raise ArchiveError(f"{path}: checkpoint missing 'classifier.w'")
    W = Tensor(entries["classifier.w"], requires_grad=True)
    b = Tensor(entries["classifier.b"], requires_grad=True) if "classifier.b" in entries else None
    clf = ClassifierParams(W=W, b=b, kind=meta["classifier_kind"], sigma=meta["classifier_sigma"])
    model = ModelState(backbone, state, clf, config, entries["meta.train_counts"].astype(np.int64))
    model.final_train_accuracy = meta.get("final_train_accuracy")
    return model


# -- parameter audit ---------------------------------------------------------------


PRESETS: dict[str, dict] = {
    "imagenet-lt": {"classes": 1000},
    "places-lt": {"classes": 365},
    "inat18": {"classes": 8142},
    "cifar100-lt": {"classes": 100},
}


def audit_params(preset: str | None = None, vit: ViTConfig | None = None,
                 peft_config: PeftConfig | None = None, classes: int | None = None) -> dict:
    """Closed-form vs. enumerated counts for the backbone and tuning module.

    The two routes must agree; disagreement raises. Presets pin the standard
    encoder with adaptformer at the default bottleneck dimension.
    """
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        classes = PRESETS[preset]["classes"]
        vit = VIT_B16
        r = default_bottleneck_dim(classes, vit.depth)
        peft_config = PeftConfig(variant="adaptformer", r=r)
    if vit is None or peft_config is None:
        raise ConfigError("audit needs either a preset or an explicit (vit, peft) pair")

    backbone_closed = count_backbone_params(vit)
    backbone_enum = enumerate_backbone_params(vit)
    peft_closed = count_peft_params(peft_config, vit)
    peft_enum = enumerate_peft_params(peft_config, vit)
    if vit.patch_dim == vit.dim and backbone_closed != backbone_enum:
        raise RuntimeError(
            f"backbone census disagreement: closed {backbone_closed} != enumerated {backbone_enum}"
        )
    if peft_closed != peft_enum:
        raise RuntimeError(f"tuning census disagreement: closed {peft_closed} != enumerated {peft_enum}")

    out = {
        "preset": preset,
        "vit": vit.to_json(),
        "peft": peft_config.to_json(),
        "backbone_params_closed_form": backbone_closed,
        "backbone_params_enumerated": backbone_enum,
        "peft_params_closed_form": peft_closed,
        "peft_params_enumerated": peft_enum,
        "peft_params_millions": round(peft_closed / 1e6, 2),
    }
    if classes is not None:
        clf = classes * vit.feature_dim
        out["classes"] = classes
        out["classifier_params"] = int(clf)
        out["bottleneck_dim"] = peft_config.r
    return out


def report_json(report: dict) -> str:
    """Canonical serialization: sorted keys, exact float repr."""
    return json.dumps(report, sort_keys=True, indent=2)
