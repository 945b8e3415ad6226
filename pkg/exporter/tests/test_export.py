import numpy as np
import pytest
import torch

import tinyclip
from pel_export.export import (
    ArchitectureMismatch,
    encode_class_prompts,
    export_backbone,
    export_text_features,
    map_vision_tensors,
)
from pel_export.manifest import ExportManifest

# the primary toolkit is the consumer; its loaders are the integration oracle
from pel.archive import load_archive
from pel.backbone import canonical_names, extract_feature, load_backbone
from pel.classifier import load_text_features


@pytest.fixture(scope="module")
def model():
    return tinyclip.build_model(seed=3)


@pytest.fixture(scope="module")
def tokenizer(tmp_path_factory):
    return tinyclip.build_tokenizer(tmp_path_factory.mktemp("tok"))


class TestManifest:
    def test_duplicate_class_names_rejected(self):
        manifest = ExportManifest(model_id="x", class_names=("cat", "dog", "cat"))
        with pytest.raises(ValueError, match="cat"):
            manifest.validate_class_names()

    def test_blank_names_rejected(self):
        manifest = ExportManifest(model_id="x", class_names=("cat", " "))
        with pytest.raises(ValueError):
            manifest.validate_class_names()

    def test_prompts_use_template(self):
        manifest = ExportManifest(model_id="x", class_names=("red", "blue"))
        assert manifest.prompts() == ["a photo of a red.", "a photo of a blue."]


class TestTextExport:
    def test_round_trips_through_primary_loader(self, model, tokenizer, tmp_path):
        manifest = ExportManifest(model_id="tiny", class_names=tinyclip.CLASS_NAMES,
                                  text_out=str(tmp_path / "text.pel"),
                                  template=tinyclip.CAPTION_TEMPLATE)
        result = export_text_features(manifest, model, tokenizer)
        assert result["classes"] == 5
        rows = load_text_features(manifest.text_out)
        assert rows.shape == (5, tinyclip.PROJ)
        direct = encode_class_prompts(manifest, model, tokenizer)
        assert rows.tobytes() == direct.tobytes()

    def test_reexport_bit_identical(self, model, tokenizer, tmp_path):
        manifest = ExportManifest(model_id="tiny", class_names=tinyclip.CLASS_NAMES,
                                  text_out=str(tmp_path / "a.pel"))
        export_text_features(manifest, model, tokenizer)
        manifest2 = ExportManifest(model_id="tiny", class_names=tinyclip.CLASS_NAMES,
                                   text_out=str(tmp_path / "b.pel"))
        export_text_features(manifest2, model, tokenizer)
        assert (tmp_path / "a.pel").read_bytes() == (tmp_path / "b.pel").read_bytes()

    def test_same_concept_across_templates_beats_other_concept(self, model, tokenizer):
        """Contrastive training on five captions spreads the classes apart, so
        relatedness is probed within a class: the same color word under a
        different template must stay closer than a different color word."""
        trained = tinyclip.build_model(seed=5)
        tinyclip.pretrain(trained, tokenizer, steps=400, seed=5)
        import torch

        enc = tokenizer(["a photo of a red blob.", "a red blob.", "a photo of a blue blob."],
                        return_tensors="pt", padding=True)
        with torch.no_grad():
            out = trained.get_text_features(input_ids=enc["input_ids"],
                                            attention_mask=enc["attention_mask"])
            feats = (out.pooler_output if hasattr(out, "pooler_output") else out).numpy()
        unit = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        assert unit[0] @ unit[1] > unit[0] @ unit[2]


class TestBackboneExport:
    def test_loads_in_primary_with_zero_warnings(self, model, tmp_path):
        manifest = ExportManifest(model_id="tiny", weights_out=str(tmp_path / "bb.pel"))
        result = export_backbone(manifest, model)
        params, warns = load_backbone(manifest.weights_out)
        assert warns == []
        assert result["tensor_entries"] == len(canonical_names(params.config))

    def test_entry_count_matches_census_structure(self, model, tmp_path):
        manifest = ExportManifest(model_id="tiny", weights_out=str(tmp_path / "bb.pel"))
        result = export_backbone(manifest, model)
        L = tinyclip.DEPTH
        # per block: 2 LN pairs + fused qkv w/b + out proj w/b + 4 ffn tensors
        assert result["tensor_entries"] == 16 * L + 8
        entries = load_archive(manifest.weights_out)
        tensor_names = {n for n in entries if not n.startswith("meta.")}
        params, _ = load_backbone(manifest.weights_out)
        assert tensor_names == set(canonical_names(params.config))

    def test_reexport_bit_identical(self, model, tmp_path):
        m1 = ExportManifest(model_id="tiny", weights_out=str(tmp_path / "a.pel"))
        m2 = ExportManifest(model_id="tiny", weights_out=str(tmp_path / "b.pel"))
        export_backbone(m1, model)
        export_backbone(m2, model)
        assert (tmp_path / "a.pel").read_bytes() == (tmp_path / "b.pel").read_bytes()

    def test_architecture_mismatch_reports_diff(self, model, tmp_path):
        broken = tinyclip.build_model(seed=4)
        with torch.no_grad():
            # corrupt a projection to the wrong shape
            layer = broken.vision_model.encoder.layers[1].self_attn
            layer.q_proj.weight = torch.nn.Parameter(torch.zeros(tinyclip.DIM, tinyclip.DIM + 1))
        manifest = ExportManifest(model_id="tiny", weights_out=str(tmp_path / "x.pel"))
        with pytest.raises(ArchitectureMismatch, match="layers.1.self_attn.q_proj"):
            export_backbone(manifest, broken)

    def test_function_identical_flag(self, model, tmp_path):
        manifest = ExportManifest(model_id="tiny", weights_out=str(tmp_path / "bb.pel"))
        result = export_backbone(manifest, model)
        assert result["activation"] == "relu"
        assert result["function_identical"] is True


class TestFunctionAgreement:
    """The exported weights, run through the toolkit's own forward pass, must
    reproduce the source model's features (relu + single head => same math)."""

    def test_image_features_agree(self, model, tmp_path):
        manifest = ExportManifest(model_id="tiny", weights_out=str(tmp_path / "bb.pel"))
        export_backbone(manifest, model)
        params, _ = load_backbone(manifest.weights_out)
        rng = np.random.default_rng(11)
        images = rng.uniform(0, 1, size=(6, 3, 32, 32)).astype(np.float32)
        with torch.no_grad():
            theirs = model.get_image_features(pixel_values=torch.from_numpy(images))
            theirs = (theirs.pooler_output if hasattr(theirs, "pooler_output") else theirs).numpy()
        ours = extract_feature(images, params, params.config).data
        denom = np.maximum(np.abs(theirs), 1e-3)
        assert np.max(np.abs(ours - theirs) / denom) < 1e-3
        cos = np.sum(ours * theirs, axis=1) / (
            np.linalg.norm(ours, axis=1) * np.linalg.norm(theirs, axis=1))
        assert np.all(cos > 0.99999)
