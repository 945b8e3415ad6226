"""Secondary acceptance: exported archives drive the primary toolkit.

Criterion 12: text-feature and weight archives load with zero shape warnings,
and semantic-init zero-shot on a 10-image, 5-class sample classifies strictly
above chance. No pretrained checkpoint is downloadable in this environment,
so the vision-language model is actually pretrained here, in torch, on
color-blob/caption pairs before being exported.
"""

import numpy as np
import pytest

import tinyclip
from pel_export.export import export_backbone, export_text_features
from pel_export.manifest import ExportManifest

from pel.backbone import extract_feature, load_backbone
from pel.classifier import ClassifierParams, init_semantic, load_text_features, logits
from pel.losses import zero_shot_predict
from pel.tensor import Tensor, no_grad


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    tok_dir = tmp_path_factory.mktemp("tok")
    tokenizer = tinyclip.build_tokenizer(tok_dir)
    model = tinyclip.build_model(seed=0)
    losses = tinyclip.pretrain(model, tokenizer, steps=400, seed=0)
    assert losses[-1] < losses[0], "contrastive pretraining failed to descend"
    return model, tokenizer


class TestCriterion12:
    def test_exported_archives_drive_zero_shot(self, pretrained, tmp_path):
        model, tokenizer = pretrained
        manifest = ExportManifest(
            model_id="tiny-pretrained",
            class_names=tinyclip.CLASS_NAMES,
            weights_out=str(tmp_path / "backbone.pel"),
            text_out=str(tmp_path / "text.pel"),
            template=tinyclip.CAPTION_TEMPLATE,
        )
        export_backbone(manifest, model)
        export_text_features(manifest, model, tokenizer)

        params, warns = load_backbone(manifest.weights_out)
        assert warns == [], f"weight archive produced warnings: {warns}"
        text_rows = load_text_features(manifest.text_out)
        assert text_rows.shape == (5, tinyclip.PROJ)

        # 10-image, 5-class held-out sample (2 per class)
        rng = np.random.default_rng(123)
        images, labels = tinyclip.render_blobs(rng, per_class=2)
        assert images.shape[0] == 10
        with no_grad():
            feats = extract_feature(images, params, params.config).data
        preds = zero_shot_predict(feats, text_rows)
        accuracy = float((preds == labels).mean())
        chance = 1.0 / len(tinyclip.CLASS_NAMES)
        assert accuracy > chance, f"zero-shot accuracy {accuracy} not above chance {chance}"

        # the semantic-init cosine head agrees with the direct rule
        head = init_semantic(manifest.text_out, feature_dim=tinyclip.PROJ, kind="cosine")
        with no_grad():
            z = logits(Tensor(feats), head)
        np.testing.assert_array_equal(np.argmax(z.data, axis=1), preds)

        # and matches the source model's own zero-shot labels
        torch_preds = tinyclip.torch_zero_shot(model, tokenizer, images)
        agreement = float((preds == torch_preds).mean())
        print(f"[PASS] criterion 12: archives load warning-free; zero-shot accuracy "
              f"{accuracy:.2f} vs chance {chance:.2f}; torch agreement {agreement:.2f}")
        assert accuracy >= 0.8, f"pretrained color model should be near-perfect, got {accuracy}"
