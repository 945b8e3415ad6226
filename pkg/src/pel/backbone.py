"""Frozen Vision-Transformer image encoder.

Pre-norm blocks: multi-head self-attention (scores scaled by 1/sqrt(d),
Q/K/V stored fused d x d and split per head at use) with a residual, then a
ReLU feed-forward with a residual. The feature is the final layer norm of the
class-token row, optionally projected into a joint-embedding space. Attachable
tuning modules interact with the forward pass only through ``ForwardHooks``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .archive import load_archive, pack_json, save_archive, unpack_json
from .errors import ArchiveError, ConfigError, ShapeError
from .rng import RngStream
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int
    patch_size: int
    depth: int  # number of blocks (L)
    dim: int  # embedding width (d)
    heads: int  # attention heads (H)
    has_feature_projection: bool = False
    projection_dim: int | None = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.has_feature_projection and not self.projection_dim:
            raise ConfigError("has_feature_projection requires projection_dim")

    @property
    def patches(self) -> int:
        """Patch count m = (image_size / patch_size)^2."""
        side = self.image_size // self.patch_size
        return side * side

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def seq_len(self) -> int:
        return self.patches + 1

    @property
    def feature_dim(self) -> int:
        return self.projection_dim if self.has_feature_projection else self.dim

    def to_json(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "depth": self.depth,
            "dim": self.dim,
            "heads": self.heads,
            "has_feature_projection": self.has_feature_projection,
            "projection_dim": self.projection_dim,
            "ln_eps": self.ln_eps,
        }

    @staticmethod
    def from_json(doc: dict) -> "ViTConfig":
        return ViTConfig(**doc)


VIT_B16 = ViTConfig(image_size=224, patch_size=16, depth=12, dim=768, heads=12)


def canonical_names(config: ViTConfig) -> list[str]:
    """All tensor names in canonical order."""
    names = ["embed.patch_proj.w", "embed.cls", "embed.pos", "embed.pre_ln.g", "embed.pre_ln.b"]
    for l in range(config.depth):
        b = f"block.{l}"
        names += [f"{b}.ln1.g", f"{b}.ln1.b"]
        names += [f"{b}.msa.{n}" for n in ("w_q", "w_k", "w_v", "b_q", "b_k", "b_v", "w_o", "b_o")]
        names += [f"{b}.ln2.g", f"{b}.ln2.b"]
        names += [f"{b}.ffn.{n}" for n in ("w1", "b1", "w2", "b2")]
    names += ["final_ln.g", "final_ln.b"]
    if config.has_feature_projection:
        names.append("feature_proj.w")
    return names


def expected_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    d = config.dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.patch_proj.w": (config.patch_dim, d),
        "embed.cls": (d,),
        "embed.pos": (config.patches + 1, d),
        "embed.pre_ln.g": (d,),
        "embed.pre_ln.b": (d,),
        "final_ln.g": (d,),
        "final_ln.b": (d,),
    }
    for l in range(config.depth):
        b = f"block.{l}"
        shapes[f"{b}.ln1.g"] = (d,)
        shapes[f"{b}.ln1.b"] = (d,)
        shapes[f"{b}.msa.w_q"] = (d, d)
        shapes[f"{b}.msa.w_k"] = (d, d)
        shapes[f"{b}.msa.w_v"] = (d, d)
        shapes[f"{b}.msa.b_q"] = (d,)
        shapes[f"{b}.msa.b_k"] = (d,)
        shapes[f"{b}.msa.b_v"] = (d,)
        shapes[f"{b}.msa.w_o"] = (d, d)
        shapes[f"{b}.msa.b_o"] = (d,)
        shapes[f"{b}.ln2.g"] = (d,)
        shapes[f"{b}.ln2.b"] = (d,)
        shapes[f"{b}.ffn.w1"] = (d, 4 * d)
        shapes[f"{b}.ffn.b1"] = (4 * d,)
        shapes[f"{b}.ffn.w2"] = (4 * d, d)
        shapes[f"{b}.ffn.b2"] = (d,)
    if config.has_feature_projection:
        shapes["feature_proj.w"] = (d, config.projection_dim)
    return shapes


class BackboneParams:
    """All encoder weights, addressable by canonical name. Frozen by default."""

    def __init__(self, config: ViTConfig, tensors: dict[str, Tensor]):
        self.config = config
        shapes = expected_shapes(config)
        for name, shape in shapes.items():
            if name not in tensors:
                raise ArchiveError(f"missing tensor {name!r}")
            if tuple(tensors[name].shape) != shape:
                raise ArchiveError(
                    f"tensor {name!r}: shape {tuple(tensors[name].shape)} != expected {shape}"
                )
        self.tensors = {name: tensors[name] for name in canonical_names(config)}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named_tensors(self):
        return self.tensors.items()

    @staticmethod
    def init_random(config: ViTConfig, rng: RngStream, dtype=np.float32) -> "BackboneParams":
        """Glorot-scaled random weights; unit LNs; zero biases."""
        tensors: dict[str, Tensor] = {}
        for name, shape in expected_shapes(config).items():
            if name.endswith((".g",)) or name == "final_ln.g":
                arr = np.ones(shape, dtype=dtype)
            elif name.endswith((".b", "b_q", "b_k", "b_v", "b_o", "b1", "b2")):
                arr = np.zeros(shape, dtype=dtype)
            elif name in ("embed.cls", "embed.pos"):
                arr = rng.normal(shape, 0.02, dtype=dtype)
            else:
                fan_in, fan_out = shape[0], shape[-1]
                arr = rng.normal(shape, math.sqrt(2.0 / (fan_in + fan_out)), dtype=dtype)
            tensors[name] = Tensor(arr)
        return BackboneParams(config, tensors)

    @staticmethod
    def init_zeros(config: ViTConfig, dtype=np.float32) -> "BackboneParams":
        return BackboneParams(
            config,
            {name: Tensor(np.zeros(shape, dtype=dtype)) for name, shape in expected_shapes(config).items()},
        )


class ForwardHooks:
    """Insertion points the tuning modules can occupy. Defaults are no-ops."""

    def adjust_sequence(self, layer: int, x: Tensor) -> Tensor:
        """Rewrite the token sequence entering block ``layer``."""
        return x

    def attn_weight(self, layer: int, which: str, w: Tensor) -> Tensor:
        """Replace the effective attention projection (``which`` in q/k/v)."""
        return w

    def after_ffn(self, layer: int, f: Tensor) -> Tensor:
        """Transform the feed-forward output before its residual."""
        return f

    def parallel_branch(self, layer: int, x_hat: Tensor) -> Tensor | None:
        """Extra term added to the block output, computed from the post-MSA state."""
        return None


def _to_float_image(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / np.float32(255.0)
    return image


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split (..., 3, S, S) pixels into (..., m, 3*p*p) row-major patches."""
    *lead, c, h, w = image.shape
    p = patch_size
    gh, gw = h // p, w // p
    x = image.reshape(*lead, c, gh, p, gw, p)
    # (..., c, gh, p, gw, p) -> (..., gh, gw, c, p, p)
    order = list(range(len(lead))) + [a + len(lead) for a in (1, 3, 0, 2, 4)]
    x = x.transpose(order)
    return np.ascontiguousarray(x).reshape(*lead, gh * gw, c * p * p)


def embed(image, params: BackboneParams, config: ViTConfig) -> Tensor:
    """Patch-project an image, prepend the class token, add positions.

    Accepts (3, S, S) or (B, 3, S, S); uint8 pixels are scaled to [0, 1].
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    batched = arr.ndim == 4
    if not batched:
        arr = arr[None]
    if arr.shape[-3] != 3 or arr.shape[-2] != config.image_size or arr.shape[-1] != config.image_size:
        raise ShapeError(
            f"image must be (3, {config.image_size}, {config.image_size}), got {arr.shape[-3:]}"
        )
    arr = _to_float_image(arr)
    dtype = params["embed.patch_proj.w"].dtype
    patches = Tensor(patchify(arr, config.patch_size).astype(dtype))
    proj = T.matmul(patches, params["embed.patch_proj.w"])  # (B, m, d)
    cls = T.broadcast_to(T.reshape(params["embed.cls"], (1, 1, config.dim)), (arr.shape[0], 1, config.dim))
    x = T.concat([cls, proj], axis=1)
    x = T.add(x, params["embed.pos"])
    return x if batched else T.reshape(x, (config.seq_len, config.dim))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def block_forward(
    x: Tensor,
    params: BackboneParams,
    layer: int,
    config: ViTConfig,
    hooks: ForwardHooks | None = None,
) -> Tensor:
    """One pre-norm block: MSA with residual, then FFN with residual."""
    b = f"block.{layer}"
    eps = config.ln_eps
    d, heads = config.dim, config.heads
    dh = d // heads
    inv_sqrt_d = 1.0 / math.sqrt(d)

    h = T.layer_norm(x, params[f"{b}.ln1.g"], params[f"{b}.ln1.b"], eps)
    w_q, w_k, w_v = (params[f"{b}.msa.w_{n}"] for n in "qkv")
    if hooks is not None:
        w_q = hooks.attn_weight(layer, "q", w_q)
        w_k = hooks.attn_weight(layer, "k", w_k)
        w_v = hooks.attn_weight(layer, "v", w_v)
    q = _linear(h, w_q, params[f"{b}.msa.b_q"])
    k = _linear(h, w_k, params[f"{b}.msa.b_k"])
    v = _linear(h, w_v, params[f"{b}.msa.b_v"])
    head_outs = []
    for hd in range(heads):
        lo, hi = hd * dh, (hd + 1) * dh
        qh = T.slice_axis(q, -1, lo, hi)
        kh = T.slice_axis(k, -1, lo, hi)
        vh = T.slice_axis(v, -1, lo, hi)
        scores = T.scale(T.matmul(qh, T.swapaxes(kh, -1, -2)), inv_sqrt_d)
        att = T.softmax(scores, axis=-1)
        head_outs.append(T.matmul(att, vh))
    msa = _linear(T.concat(head_outs, axis=-1), params[f"{b}.msa.w_o"], params[f"{b}.msa.b_o"])
    x_hat = T.add(msa, x)

    h2 = T.layer_norm(x_hat, params[f"{b}.ln2.g"], params[f"{b}.ln2.b"], eps)
    f = _linear(T.relu(_linear(h2, params[f"{b}.ffn.w1"], params[f"{b}.ffn.b1"])), params[f"{b}.ffn.w2"], params[f"{b}.ffn.b2"])
    if hooks is not None:
        f = hooks.after_ffn(layer, f)
    out = T.add(f, x_hat)
    if hooks is not None:
        branch = hooks.parallel_branch(layer, x_hat)
        if branch is not None:
            out = T.add(out, branch)
    return out


def forward_features(image, params: BackboneParams, config: ViTConfig, hooks: ForwardHooks | None = None) -> Tensor:
    """Run the full encoder; returns the (batched) feature vector."""
    x = embed(image, params, config)
    x = T.layer_norm(x, params["embed.pre_ln.g"], params["embed.pre_ln.b"], config.ln_eps)
    for layer in range(config.depth):
        if hooks is not None:
            x = hooks.adjust_sequence(layer, x)
        x = block_forward(x, params, layer, config, hooks)
    cls_row = T.slice_axis(x, -2, 0, 1)  # class token stays at row 0
    cls_row = T.reshape(cls_row, cls_row.shape[:-2] + (config.dim,))
    feat = T.layer_norm(cls_row, params["final_ln.g"], params["final_ln.b"], config.ln_eps)
    if config.has_feature_projection:
        if feat.ndim == 1:
            proj = T.matmul(T.reshape(feat, (1, config.dim)), params["feature_proj.w"])
            feat = T.reshape(proj, (config.projection_dim,))
        else:
            feat = T.matmul(feat, params["feature_proj.w"])
    return feat


def extract_feature(image, params: BackboneParams, config: ViTConfig, hooks: ForwardHooks | None = None) -> Tensor:
    return forward_features(image, params, config, hooks)


def count_backbone_params(config: ViTConfig) -> int:
    """Closed-form census: (12L+1)d^2 + (13L+m+6)d, feature projection excluded."""
    L, d, m = config.depth, config.dim, config.patches
    return (12 * L + 1) * d * d + (13 * L + m + 6) * d


def enumerate_backbone_params(config: ViTConfig) -> int:
    """Element count summed over every encoder tensor (projection excluded)."""
    shapes = expected_shapes(config)
    shapes.pop("feature_proj.w", None)
    return int(sum(int(np.prod(s)) for s in shapes.values()))


def set_trainable(params: BackboneParams, mode: str, k: int | None = None) -> None:
    """frozen: nothing trains; full: everything; partial(k): last k blocks + final LN."""
    L = params.config.depth
    if mode == "frozen":
        for t in params.tensors.values():
            t.requires_grad = False
        return
    if mode == "full":
        for t in params.tensors.values():
            t.requires_grad = True
        return
    if mode == "partial":
        if k is None or not 0 <= k <= L:
            raise ConfigError(f"partial mode requires 0 <= k <= {L}, got {k}")
        for t in params.tensors.values():
            t.requires_grad = False
        for l in range(L - k, L):
            for name, t in params.tensors.items():
                if name.startswith(f"block.{l}."):
                    t.requires_grad = True
        if k >= 1:
            params["final_ln.g"].requires_grad = True
            params["final_ln.b"].requires_grad = True
        return
    raise ConfigError(f"unknown trainable mode {mode!r}")


def trainable_backbone_tensors(params: BackboneParams) -> list[tuple[str, Tensor]]:
    return [(n, t) for n, t in params.tensors.items() if t.requires_grad]


def save_backbone(params: BackboneParams, path) -> None:
    entries = {name: t.data for name, t in params.tensors.items()}
    entries["meta.vit_config"] = pack_json(params.config.to_json())
    save_archive(entries, path)


def load_backbone(path, config: ViTConfig | None = None) -> tuple[BackboneParams, list[str]]:
    """Load and shape-validate an encoder archive.

    Returns the params (frozen) and a list of warnings for unknown entries.
    Missing or mis-shaped tensors raise ArchiveError naming the entry.
    """
    entries = load_archive(path)
    if config is None:
        if "meta.vit_config" not in entries:
            raise ArchiveError(f"{path}: no meta.vit_config entry and no explicit config given")
        config = ViTConfig.from_json(unpack_json(entries["meta.vit_config"]))
    shapes = expected_shapes(config)
    tensors: dict[str, Tensor] = {}
    warnings_list: list[str] = []
    for name, shape in shapes.items():
        if name not in entries:
            raise ArchiveError(f"{path}: archive missing tensor {name!r}")
        arr = entries[name]
        if tuple(arr.shape) != shape:
            raise ArchiveError(f"{path}: tensor {name!r} has shape {tuple(arr.shape)}, expected {shape}")
        tensors[name] = Tensor(arr)
    for name in entries:
        if name not in shapes and not name.startswith("meta."):
            warnings_list.append(f"unknown entry {name!r} ignored")
    return BackboneParams(config, tensors), warnings_list
