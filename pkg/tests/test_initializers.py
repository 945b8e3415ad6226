"""Feature-based classifier initializers: class means and the linear probe."""

import numpy as np
import pytest

from pel import backbone as bb
from pel import tensor as T
from pel.classifier import init_class_mean, init_linear_probe, init_random, logits
from pel.data import LabeledDataset, SyntheticLTSpec, generate_synthetic_lt
from pel.rng import RngStream
from pel.tensor import Tensor

TINY = bb.ViTConfig(image_size=8, patch_size=4, depth=1, dim=16, heads=2)


def frozen_backbone(seed=0):
    params = bb.BackboneParams.init_random(TINY, RngStream(seed))
    bb.set_trainable(params, "frozen")
    return params


def tiny_dataset(per_class, K=3, seed=0):
    rng = RngStream(seed)
    images = rng.integers(0, 256, size=(per_class * K, 3, 8, 8)).astype(np.uint8)
    labels = np.repeat(np.arange(K), per_class)
    return LabeledDataset(images, labels, [f"c{k}" for k in range(K)])


class TestClassMean:
    def test_single_sample_per_class_equals_feature(self):
        backbone = frozen_backbone()
        ds = tiny_dataset(per_class=1)
        params = init_class_mean(ds, backbone, TINY)
        with T.no_grad():
            feats = bb.extract_feature(ds.normalized_images(), backbone, TINY).data
        for k in range(3):
            np.testing.assert_allclose(params.W.data[k], feats[ds.labels == k][0], atol=1e-6)

    def test_duplicates_do_not_change_mean(self):
        backbone = frozen_backbone()
        ds = tiny_dataset(per_class=2)
        doubled = LabeledDataset(
            np.concatenate([ds.images, ds.images]),
            np.concatenate([ds.labels, ds.labels]),
            ds.class_names,
        )
        a = init_class_mean(ds, backbone, TINY).W.data
        b = init_class_mean(doubled, backbone, TINY).W.data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_matches_two_pass_average(self):
        backbone = frozen_backbone()
        ds = tiny_dataset(per_class=5, seed=3)
        params = init_class_mean(ds, backbone, TINY)
        with T.no_grad():
            feats = bb.extract_feature(ds.normalized_images(), backbone, TINY).data.astype(np.float64)
        for k in range(3):
            rows = feats[ds.labels == k]
            total = np.zeros(rows.shape[1])
            for r in rows:  # brute-force two-pass accumulation
                total += r
            np.testing.assert_allclose(params.W.data[k], total / len(rows), atol=1e-6)

    def test_empty_class_named(self):
        backbone = frozen_backbone()
        ds = tiny_dataset(per_class=2)
        truncated = LabeledDataset(ds.images[:4], ds.labels[:4], ds.class_names)
        with pytest.raises(ValueError, match="class 2"):
            init_class_mean(truncated, backbone, TINY)


class TestLinearProbe:
    def test_separable_two_class_reaches_full_train_accuracy(self):
        """Construct a cleanly separable 2-class feature set: the probe must
        fit the training set perfectly."""
        from pel.classifier import probe_features

        rng = RngStream(5)
        centers = np.stack([np.ones(16), -np.ones(16)]).astype(np.float32) / 4.0
        labels = np.repeat([0, 1], 40)
        feats = centers[labels] + rng.normal((80, 16), 0.05)
        params = probe_features(feats, labels, 2, probe_epochs=30, lr=0.01, rng=RngStream(6))
        z = logits(Tensor(feats), params)
        acc = float((np.argmax(z.data, axis=1) == labels).mean())
        assert acc == 1.0, f"probe train accuracy {acc}"

    def test_zero_epochs_equals_random_init(self):
        backbone = frozen_backbone(1)
        ds = tiny_dataset(per_class=3)
        probe = init_linear_probe(ds, backbone, TINY, probe_epochs=0, rng=RngStream(7))
        rand = init_random(3, TINY.dim, RngStream(7))
        assert probe.W.data.tobytes() == rand.W.data.tobytes()

    def test_deterministic_under_seed(self):
        backbone = frozen_backbone(1)
        ds = tiny_dataset(per_class=4, seed=9)
        a = init_linear_probe(ds, backbone, TINY, probe_epochs=2, rng=RngStream(8))
        b = init_linear_probe(ds, backbone, TINY, probe_epochs=2, rng=RngStream(8))
        assert a.W.data.tobytes() == b.W.data.tobytes()
