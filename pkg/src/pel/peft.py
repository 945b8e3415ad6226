"""Attachable parameter-efficient tuning modules.

Each variant owns a small set of trainable tensors and occupies specific
forward-pass insertion points on a frozen encoder:

- ``ln_tuning`` / ``bitfit`` unfreeze existing layer-norm / bias tensors.
- ``vpt_shallow`` / ``vpt_deep`` prepend learnable prompt rows after the
  class token (deep replaces the prompt rows at every block input, so the
  sequence length stays m + 1 + p).
- ``adapter`` passes the feed-forward output through a bottleneck
  (LN -> down -> ReLU -> up) added residually.
- ``lora`` adds a low-rank delta to the attention Q/V projection weights,
  kept unfused so the frozen base weights stay bit-identical.
- ``adaptformer`` runs the bottleneck in parallel with the feed-forward
  sublayer, scaled by a learnable per-layer scalar s.

Up-projections start at zero, so adapter/lora/adaptformer attach as exact
identities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneParams, ForwardHooks, ViTConfig
from .errors import ConfigError
from .rng import RngStream
from .tensor import Tensor

VARIANTS = ("none", "ln_tuning", "bitfit", "vpt_shallow", "vpt_deep", "adapter", "lora", "adaptformer")
_BOTTLENECK = ("adapter", "lora", "adaptformer")
_PROMPTED = ("vpt_shallow", "vpt_deep")

BITFIT_SUFFIXES = ("ln1.b", "msa.b_q", "msa.b_k", "msa.b_v", "msa.b_o", "ln2.b", "ffn.b1", "ffn.b2")
LN_TUNING_SUFFIXES = ("ln1.g", "ln1.b", "ln2.g", "ln2.b")

PROMPT_INIT_STD = 0.02
SCALE_INIT = 1.0


@dataclass(frozen=True)
class PeftConfig:
    variant: str = "adaptformer"
    p: int | None = None
    r: int | None = None
    lora_targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant in _PROMPTED:
            if self.p is None or self.p < 1:
                raise ConfigError(f"{self.variant} requires prompt count p >= 1, got {self.p}")
            if self.r is not None:
                raise ConfigError(f"{self.variant} does not take a bottleneck dim r")
        elif self.variant in _BOTTLENECK:
            if self.r is None or self.r < 1:
                raise ConfigError(f"{self.variant} requires bottleneck dim r >= 1, got {self.r}")
            if self.p is not None:
                raise ConfigError(f"{self.variant} does not take a prompt count p")
        else:
            if self.p is not None or self.r is not None:
                raise ConfigError(f"{self.variant} takes neither p nor r")
        targets = tuple(t.lower() for t in self.lora_targets)
        if self.variant == "lora":
            if not targets or not set(targets) <= {"q", "v"}:
                raise ConfigError(f"lora_targets must be a nonempty subset of {{q, v}}, got {self.lora_targets}")
        object.__setattr__(self, "lora_targets", targets)

    def to_json(self) -> dict:
        return {"variant": self.variant, "p": self.p, "r": self.r, "lora_targets": list(self.lora_targets)}

    @staticmethod
    def from_json(doc: dict) -> "PeftConfig":
        doc = dict(doc)
        doc["lora_targets"] = tuple(doc.get("lora_targets", ("q", "v")))
        return PeftConfig(**doc)


def default_bottleneck_dim(class_count: int, depth: int) -> int:
    """Largest power of two not exceeding K / (2L), floored at 1."""
    if class_count < 1 or depth < 1:
        raise ConfigError("class_count and depth must be >= 1")
    exp = math.floor(math.log2(class_count / (2 * depth)))
    return 1 if exp < 0 else 2**exp


class PeftState(ForwardHooks):
    """Trainable tensors for one attached variant, plus its forward hooks."""

    def __init__(self, config: PeftConfig, vit: ViTConfig, backbone: BackboneParams):
        self.config = config
        self.vit = vit
        self.backbone = backbone
        self.owned: dict[str, Tensor] = {}
        self.unfrozen_backbone: list[str] = []

    # -- parameter bookkeeping ------------------------------------------

    def _own(self, layer: int, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(arr, requires_grad=True)
        self.owned[f"peft.{self.config.variant}.{layer}.{name}"] = t
        return t

    def _key(self, layer: int, name: str) -> str:
        return f"peft.{self.config.variant}.{layer}.{name}"

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        params = list(self.owned.items())
        for bname in self.unfrozen_backbone:
            layer, suffix = _split_block_name(bname)
            params.append((f"peft.{self.config.variant}.{layer}.{suffix}", self.backbone[bname]))
        return params

    def trainable_count(self) -> int:
        return sum(t.size for _, t in self.trainable_params())

    def to_entries(self) -> dict[str, np.ndarray]:
        entries = {name: t.data for name, t in self.trainable_params()}
        return entries

    def load_entries(self, entries: dict[str, np.ndarray]) -> None:
        """Restore trainable values from archive entries (shapes must match)."""
        for name, t in list(self.owned.items()):
            if name not in entries:
                raise ConfigError(f"checkpoint missing tuning tensor {name!r}")
            if tuple(entries[name].shape) != t.shape:
                raise ConfigError(f"tuning tensor {name!r}: shape {entries[name].shape} != {t.shape}")
            self.owned[name] = Tensor(entries[name].astype(t.data.dtype), requires_grad=True)
        for bname in self.unfrozen_backbone:
            layer, suffix = _split_block_name(bname)
            key = f"peft.{self.config.variant}.{layer}.{suffix}"
            if key not in entries:
                raise ConfigError(f"checkpoint missing tuning tensor {key!r}")
            new = Tensor(entries[key].astype(self.backbone[bname].data.dtype), requires_grad=True)
            self.backbone.tensors[bname] = new

    # -- hook implementations --------------------------------------------

    def adjust_sequence(self, layer: int, x: Tensor) -> Tensor:
        v = self.config.variant
        if v == "vpt_shallow" and layer == 0:
            return _insert_prompts(x, self.owned[self._key(0, "prompts")], replace=False)
        if v == "vpt_deep":
            prompts = self.owned[self._key(layer, "prompts")]
            return _insert_prompts(x, prompts, replace=layer > 0)
        return x

    def attn_weight(self, layer: int, which: str, w: Tensor) -> Tensor:
        if self.config.variant == "lora" and which in self.config.lora_targets:
            down = self.owned[self._key(layer, f"{which}.w_down")]
            up = self.owned[self._key(layer, f"{which}.w_up")]
            return T.add(w, T.matmul(down, up))
        return w

    def after_ffn(self, layer: int, f: Tensor) -> Tensor:
        if self.config.variant == "adapter":
            return T.add(f, self._bottleneck(layer, f))
        return f

    def parallel_branch(self, layer: int, x_hat: Tensor) -> Tensor | None:
        if self.config.variant == "adaptformer":
            return T.mul(self._bottleneck(layer, x_hat), self.owned[self._key(layer, "s")])
        return None

    def _bottleneck(self, layer: int, x: Tensor) -> Tensor:
        k = self._key
        h = T.layer_norm(x, self.owned[k(layer, "ln.g")], self.owned[k(layer, "ln.b")], self.vit.ln_eps)
        h = T.relu(T.add(T.matmul(h, self.owned[k(layer, "w_down")]), self.owned[k(layer, "b_down")]))
        return T.add(T.matmul(h, self.owned[k(layer, "w_up")]), self.owned[k(layer, "b_up")])


def _split_block_name(bname: str) -> tuple[int, str]:
    parts = bname.split(".")
    if parts[0] != "block":
        raise ConfigError(f"cannot map backbone tensor {bname!r} to a layer")
    return int(parts[1]), ".".join(parts[2:])


def _insert_prompts(x: Tensor, prompts: Tensor, replace: bool) -> Tensor:
    p = prompts.shape[0]
    seq_axis = x.ndim - 2
    rows = prompts
    if x.ndim == 3:
        rows = T.broadcast_to(T.reshape(prompts, (1,) + prompts.shape), (x.shape[0],) + prompts.shape)
    head = T.slice_axis(x, seq_axis, 0, 1)
    tail_start = 1 + p if replace else 1
    tail = T.slice_axis(x, seq_axis, tail_start, x.shape[seq_axis])
    return T.concat([head, rows, tail], axis=seq_axis)


def attach(config: PeftConfig, backbone: BackboneParams, rng: RngStream, dtype=np.float32) -> PeftState:
    """Create and register a tuning module on ``backbone``.

    Bottleneck/low-rank up-projections are zero-initialized, so the attached
    network function starts identical to the detached encoder.
    """
    vit = backbone.config
    state = PeftState(config, vit, backbone)
    d, L = vit.dim, vit.depth
    v = config.variant

    if v == "none":
        return state
    if v in ("bitfit", "ln_tuning"):
        suffixes = BITFIT_SUFFIXES if v == "bitfit" else LN_TUNING_SUFFIXES
        for l in range(L):
            for suffix in suffixes:
                name = f"block.{l}.{suffix}"
                backbone[name].requires_grad = True
                state.unfrozen_backbone.append(name)
        return state
    if v in _PROMPTED:
        layers = [0] if v == "vpt_shallow" else list(range(L))
        for l in layers:
            state._own(l, "prompts", rng.normal((config.p, d), PROMPT_INIT_STD, dtype=dtype))
        return state
    if v == "lora":
        r = config.r
        bound = math.sqrt(6.0 / d)
        for l in range(L):
            for t in config.lora_targets:
                state._own(l, f"{t}.w_down", rng.uniform((d, r), -bound, bound, dtype=dtype))
                state._own(l, f"{t}.w_up", np.zeros((r, d), dtype=dtype))
        return state
    # adapter / adaptformer bottlenecks
    r = config.r
    bound = math.sqrt(6.0 / d)
    for l in range(L):
        state._own(l, "ln.g", np.ones(d, dtype=dtype))
        state._own(l, "ln.b", np.zeros(d, dtype=dtype))
        state._own(l, "w_down", rng.uniform((d, r), -bound, bound, dtype=dtype))
        state._own(l, "b_down", np.zeros(r, dtype=dtype))
        state._own(l, "w_up", np.zeros((r, d), dtype=dtype))
        state._own(l, "b_up", np.zeros(d, dtype=dtype))
        if v == "adaptformer":
            state._own(l, "s", np.asarray(SCALE_INIT, dtype=dtype))
    return state


def peft_tensor_shapes(config: PeftConfig, vit: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Every trainable tensor the variant brings (owned or unfrozen), by name."""
    d, L = vit.dim, vit.depth
    v = config.variant
    shapes: dict[str, tuple[int, ...]] = {}
    if v == "none":
        return shapes
    if v in ("bitfit", "ln_tuning"):
        suffix_shapes = {
            "ln1.b": (d,), "ln1.g": (d,), "ln2.b": (d,), "ln2.g": (d,),
            "msa.b_q": (d,), "msa.b_k": (d,), "msa.b_v": (d,), "msa.b_o": (d,),
            "ffn.b1": (4 * d,), "ffn.b2": (d,),
        }
        suffixes = BITFIT_SUFFIXES if v == "bitfit" else LN_TUNING_SUFFIXES
        for l in range(L):
            for suffix in suffixes:
                shapes[f"peft.{v}.{l}.{suffix}"] = suffix_shapes[suffix]
        return shapes
    if v in _PROMPTED:
        layers = [0] if v == "vpt_shallow" else range(L)
        for l in layers:
            shapes[f"peft.{v}.{l}.prompts"] = (config.p, d)
        return shapes
    r = config.r
    if v == "lora":
        for l in range(L):
            for t in config.lora_targets:
                shapes[f"peft.{v}.{l}.{t}.w_down"] = (d, r)
                shapes[f"peft.{v}.{l}.{t}.w_up"] = (r, d)
        return shapes
    for l in range(L):
        shapes[f"peft.{v}.{l}.ln.g"] = (d,)
        shapes[f"peft.{v}.{l}.ln.b"] = (d,)
        shapes[f"peft.{v}.{l}.w_down"] = (d, r)
        shapes[f"peft.{v}.{l}.b_down"] = (r,)
        shapes[f"peft.{v}.{l}.w_up"] = (r, d)
        shapes[f"peft.{v}.{l}.b_up"] = (d,)
        if v == "adaptformer":
            shapes[f"peft.{v}.{l}.s"] = ()
    return shapes


def enumerate_peft_params(config: PeftConfig, vit: ViTConfig) -> int:
    """Trainable-parameter total by exhaustive enumeration of tensor shapes."""
    return int(sum(int(np.prod(s)) if s else 1 for s in peft_tensor_shapes(config, vit).values()))


def count_peft_params(config: PeftConfig, vit: ViTConfig) -> int:
    """Closed-form trainable-parameter total for a variant on ``vit``."""
    d, L = vit.dim, vit.depth
    v = config.variant
    if v == "none":
        return 0
    if v == "ln_tuning":
        return 4 * d * L
    if v == "bitfit":
        return 11 * d * L
    if v == "vpt_shallow":
        return config.p * d
    if v == "vpt_deep":
        return config.p * d * L
    if v == "adapter":
        return ((2 * config.r + 3) * d + config.r) * L
    if v == "lora":
        return 2 * config.r * d * len(config.lora_targets) * L
    if v == "adaptformer":
        return ((2 * config.r + 3) * d + config.r + 1) * L
    raise ConfigError(f"unknown variant {v!r}")


def learned_scales(state: PeftState) -> list[float]:
    """Current per-layer scaling values, in layer order (adaptformer only)."""
    if state.config.variant != "adaptformer":
        raise ValueError(f"learned_scales requires adaptformer, got {state.config.variant!r}")
    return [float(state.owned[state._key(l, "s")].data) for l in range(state.vit.depth)]
