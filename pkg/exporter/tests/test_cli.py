import json

import numpy as np
import pytest

import tinyclip
from pel_export.cli import main

from pel.backbone import load_backbone
from pel.classifier import load_text_features


@pytest.fixture(scope="module")
def saved_model_dir(tmp_path_factory):
    """A locally saved model + tokenizer directory (offline from_pretrained)."""
    d = tmp_path_factory.mktemp("saved_model")
    model = tinyclip.build_model(seed=9)
    model.save_pretrained(d)
    tok = tinyclip.build_tokenizer(tmp_path_factory.mktemp("tokfiles"))
    tok.save_pretrained(d)
    return str(d)


class TestBackboneCommand:
    def test_export_and_load(self, saved_model_dir, tmp_path, capsys):
        out = tmp_path / "bb.pel"
        code = main(["backbone", "--model", saved_model_dir, "--out", str(out)])
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert result["tensor_entries"] == 16 * tinyclip.DEPTH + 8
        assert "embed.patch_proj.w" in result["shapes"]
        params, warns = load_backbone(out)
        assert warns == []


class TestTextCommand:
    def test_export_and_load(self, saved_model_dir, tmp_path, capsys):
        out = tmp_path / "text.pel"
        code = main(["text", "--model", saved_model_dir,
                     "--classes", ",".join(tinyclip.CLASS_NAMES),
                     "--template", tinyclip.CAPTION_TEMPLATE, "--out", str(out)])
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert result["classes"] == 5
        rows = load_text_features(out)
        assert rows.shape == (5, tinyclip.PROJ)

    def test_duplicate_classes_exit_1(self, saved_model_dir, tmp_path):
        code = main(["text", "--model", saved_model_dir,
                     "--classes", "red,red", "--out", str(tmp_path / "x.pel")])
        assert code == 1

    def test_classes_file(self, saved_model_dir, tmp_path, capsys):
        names = tmp_path / "names.txt"
        names.write_text("\n".join(tinyclip.CLASS_NAMES) + "\n")
        out = tmp_path / "text.pel"
        code = main(["text", "--model", saved_model_dir, "--classes-file", str(names),
                     "--out", str(out)])
        assert code == 0
        assert load_text_features(out).shape[0] == 5
