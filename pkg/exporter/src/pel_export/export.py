"""Convert a CLIP-style vision-language model into the toolkit's archives.

The visual tower is renamed to the toolkit's canonical scheme (fused-QKV
convention, bias-free patch projection, pre/post layer norms, and the joint-
embedding projection under ``feature_proj.w``); per-class text features are
written as ``text_emb.<k>`` rows in dataset order.

The toolkit's feed-forward activation is ReLU and its attention scores are
scaled by 1/sqrt(d). Exports from models with a different activation or more
than one attention head are still structurally valid but not function-
identical; the returned manifest records this.
"""

from __future__ import annotations

import numpy as np
import torch

from .archive import json_entry, write_archive
from .manifest import ExportManifest


class ArchitectureMismatch(RuntimeError):
    """Visual encoder does not fit the expected ViT layout."""


def _pooled(output):
    """Projected features from either a raw tensor or a pooling output."""
    if hasattr(output, "pooler_output"):
        return output.pooler_output
    return output


def _np32(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float32)


# -- text features -------------------------------------------------------------


def encode_class_prompts(manifest: ExportManifest, model, tokenizer) -> np.ndarray:
    """One joint-embedding feature row per class, dataset order."""
    prompts = manifest.prompts()
    failures = []
    for name, prompt in zip(manifest.class_names, prompts):
        try:
            tokenizer([prompt], return_tensors="pt", padding=True)
        except Exception:
            failures.append(name)
    if failures:
        raise ValueError(f"class names the tokenizer cannot encode: {failures}")
    enc = tokenizer(prompts, return_tensors="pt", padding=True)
    with torch.no_grad():
        feats = _pooled(model.get_text_features(
            input_ids=enc["input_ids"], attention_mask=enc.get("attention_mask")))
    return _np32(feats)


def export_text_features(manifest: ExportManifest, model, tokenizer) -> dict:
    if manifest.text_out is None:
        raise ValueError("manifest.text_out is not set")
    feats = encode_class_prompts(manifest, model, tokenizer)
    entries: dict[str, np.ndarray] = {
        f"text_emb.{k}": feats[k] for k in range(feats.shape[0])
    }
    entries["meta.class_count"] = np.int64(feats.shape[0])
    write_archive(entries, manifest.text_out)
    return {
        "path": manifest.text_out,
        "classes": len(manifest.class_names),
        "feature_dim": int(feats.shape[1]),
        "template": manifest.template,
    }


# -- visual tower ----------------------------------------------------------------


def _vision_geometry(model) -> dict:
    cfg = model.config.vision_config
    d = cfg.hidden_size
    geometry = {
        "image_size": cfg.image_size,
        "patch_size": cfg.patch_size,
        "depth": cfg.num_hidden_layers,
        "dim": d,
        "heads": cfg.num_attention_heads,
        "has_feature_projection": True,
        "projection_dim": model.config.projection_dim,
        "ln_eps": cfg.layer_norm_eps,
    }
    problems = []
    if cfg.image_size % cfg.patch_size != 0:
        problems.append(f"image_size {cfg.image_size} not divisible by patch_size {cfg.patch_size}")
    if d % cfg.num_attention_heads != 0:
        problems.append(f"hidden {d} not divisible by heads {cfg.num_attention_heads}")
    if cfg.intermediate_size != 4 * d:
        problems.append(f"feed-forward width {cfg.intermediate_size} != 4*dim ({4 * d})")
    if problems:
        raise ArchitectureMismatch("; ".join(problems))
    return geometry


def _expected_vision_shapes(geometry: dict) -> dict[str, tuple[int, ...]]:
    d = geometry["dim"]
    p = geometry["patch_size"]
    m = (geometry["image_size"] // p) ** 2
    shapes = {
        "vision_model.embeddings.class_embedding": (d,),
        "vision_model.embeddings.patch_embedding.weight": (d, 3, p, p),
        "vision_model.embeddings.position_embedding.weight": (m + 1, d),
        "vision_model.pre_layrnorm.weight": (d,),
        "vision_model.pre_layrnorm.bias": (d,),
        "vision_model.post_layernorm.weight": (d,),
        "vision_model.post_layernorm.bias": (d,),
        "visual_projection.weight": (geometry["projection_dim"], d),
    }
    for l in range(geometry["depth"]):
        base = f"vision_model.encoder.layers.{l}"
        for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
            shapes[f"{base}.self_attn.{proj}.weight"] = (d, d)
            shapes[f"{base}.self_attn.{proj}.bias"] = (d,)
        shapes[f"{base}.layer_norm1.weight"] = (d,)
        shapes[f"{base}.layer_norm1.bias"] = (d,)
        shapes[f"{base}.layer_norm2.weight"] = (d,)
        shapes[f"{base}.layer_norm2.bias"] = (d,)
        shapes[f"{base}.mlp.fc1.weight"] = (4 * d, d)
        shapes[f"{base}.mlp.fc1.bias"] = (4 * d,)
        shapes[f"{base}.mlp.fc2.weight"] = (d, 4 * d)
        shapes[f"{base}.mlp.fc2.bias"] = (d,)
    return shapes


def map_vision_tensors(model) -> tuple[dict[str, np.ndarray], dict]:
    """State dict -> canonical names; raises with a shape diff on mismatch."""
    geometry = _vision_geometry(model)
    sd = {k: v for k, v in model.state_dict().items()}
    expected = _expected_vision_shapes(geometry)
    diffs = []
    for key, shape in expected.items():
        if key not in sd:
            diffs.append(f"missing {key} (expected {shape})")
        elif tuple(sd[key].shape) != shape:
            diffs.append(f"{key}: got {tuple(sd[key].shape)}, expected {shape}")
    if diffs:
        raise ArchitectureMismatch("visual encoder does not match the ViT layout:\n  "
                                   + "\n  ".join(diffs))

    d = geometry["dim"]
    entries: dict[str, np.ndarray] = {}
    conv = sd["vision_model.embeddings.patch_embedding.weight"]
    # (d, 3, p, p) kernels -> rows are channel-major flattened patches
    entries["embed.patch_proj.w"] = _np32(conv.reshape(d, -1).T)
    entries["embed.cls"] = _np32(sd["vision_model.embeddings.class_embedding"])
    entries["embed.pos"] = _np32(sd["vision_model.embeddings.position_embedding.weight"])
    entries["embed.pre_ln.g"] = _np32(sd["vision_model.pre_layrnorm.weight"])
    entries["embed.pre_ln.b"] = _np32(sd["vision_model.pre_layrnorm.bias"])
    for l in range(geometry["depth"]):
        src = f"vision_model.encoder.layers.{l}"
        dst = f"block.{l}"
        entries[f"{dst}.ln1.g"] = _np32(sd[f"{src}.layer_norm1.weight"])
        entries[f"{dst}.ln1.b"] = _np32(sd[f"{src}.layer_norm1.bias"])
        for mine, theirs in (("w_q", "q_proj"), ("w_k", "k_proj"), ("w_v", "v_proj")):
            entries[f"{dst}.msa.{mine}"] = _np32(sd[f"{src}.self_attn.{theirs}.weight"].T)
            entries[f"{dst}.msa.{mine.replace('w', 'b')}"] = _np32(sd[f"{src}.self_attn.{theirs}.bias"])
        entries[f"{dst}.msa.w_o"] = _np32(sd[f"{src}.self_attn.out_proj.weight"].T)
        entries[f"{dst}.msa.b_o"] = _np32(sd[f"{src}.self_attn.out_proj.bias"])
        entries[f"{dst}.ln2.g"] = _np32(sd[f"{src}.layer_norm2.weight"])
        entries[f"{dst}.ln2.b"] = _np32(sd[f"{src}.layer_norm2.bias"])
        entries[f"{dst}.ffn.w1"] = _np32(sd[f"{src}.mlp.fc1.weight"].T)
        entries[f"{dst}.ffn.b1"] = _np32(sd[f"{src}.mlp.fc1.bias"])
        entries[f"{dst}.ffn.w2"] = _np32(sd[f"{src}.mlp.fc2.weight"].T)
        entries[f"{dst}.ffn.b2"] = _np32(sd[f"{src}.mlp.fc2.bias"])
    entries["final_ln.g"] = _np32(sd["vision_model.post_layernorm.weight"])
    entries["final_ln.b"] = _np32(sd["vision_model.post_layernorm.bias"])
    entries["feature_proj.w"] = _np32(sd["visual_projection.weight"].T)
    return entries, geometry


def export_backbone(manifest: ExportManifest, model) -> dict:
    """Write the renamed visual tower; returns the shape manifest."""
    if manifest.weights_out is None:
        raise ValueError("manifest.weights_out is not set")
    entries, geometry = map_vision_tensors(model)
    shape_manifest = {name: list(arr.shape) for name, arr in sorted(entries.items())}
    entries["meta.vit_config"] = json_entry(geometry)
    write_archive(entries, manifest.weights_out)
    act = model.config.vision_config.hidden_act
    return {
        "path": manifest.weights_out,
        "tensor_entries": len(shape_manifest),
        "shapes": shape_manifest,
        "geometry": geometry,
        "activation": act,
        "function_identical": act == "relu" and geometry["heads"] == 1,
        "note": (
            "toolkit forward uses ReLU feed-forward and 1/sqrt(dim) attention scaling; "
            "exports are weight-faithful, function-identical only for relu single-head models"
        ),
    }
