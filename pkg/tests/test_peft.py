import numpy as np
import pytest

from gradcheck import check_gradients
from pel import backbone as bb
from pel import peft
from pel.errors import ConfigError
from pel.rng import RngStream
from pel.tensor import Tensor, backward, sum_

TINY = bb.ViTConfig(image_size=8, patch_size=4, depth=2, dim=32, heads=4)


def make_backbone(seed=0, config=TINY, dtype=np.float32):
    params = bb.BackboneParams.init_random(config, RngStream(seed), dtype=dtype)
    bb.set_trainable(params, "frozen")
    return params


class TestPeftConfig:
    def test_r_rejected_for_vpt(self):
        with pytest.raises(ConfigError):
            peft.PeftConfig(variant="vpt_deep", p=4, r=8)

    def test_p_required_for_vpt(self):
        with pytest.raises(ConfigError):
            peft.PeftConfig(variant="vpt_shallow")

    def test_r_required_for_bottlenecks(self):
        for v in ("adapter", "lora", "adaptformer"):
            with pytest.raises(ConfigError):
                peft.PeftConfig(variant=v)

    def test_lora_targets_validated(self):
        with pytest.raises(ConfigError):
            peft.PeftConfig(variant="lora", r=4, lora_targets=("q", "x"))
        cfg = peft.PeftConfig(variant="lora", r=4, lora_targets=("Q",))
        assert cfg.lora_targets == ("q",)


class TestBottleneckRule:
    @pytest.mark.parametrize("K,expected", [(1000, 32), (8142, 256), (365, 8), (100, 4), (24, 1)])
    def test_known_values(self, K, expected):
        assert peft.default_bottleneck_dim(K, 12) == expected

    def test_matches_brute_force(self):
        for K in range(1, 3000, 37):
            for L in (1, 2, 12):
                got = peft.default_bottleneck_dim(K, L)
                target = K / (2 * L)
                r = 1
                while r * 2 <= target:
                    r *= 2
                assert got == r, (K, L)


class TestIdentityAtInit:
    @pytest.mark.parametrize("variant,kw", [
        ("adapter", {"r": 4}),
        ("lora", {"r": 4}),
        ("adaptformer", {"r": 4}),
    ])
    def test_feature_bit_identical(self, variant, kw):
        backbone = make_backbone(1)
        state = peft.attach(peft.PeftConfig(variant=variant, **kw), backbone, RngStream(2))
        rng = RngStream(3)
        for _ in range(10):
            img = rng.normal((3, 8, 8))
            plain = bb.extract_feature(img, backbone, TINY).data
            hooked = bb.extract_feature(img, backbone, TINY, hooks=state).data
            assert plain.tobytes() == hooked.tobytes()

    def test_vpt_changes_function(self):
        backbone = make_backbone(1)
        state = peft.attach(peft.PeftConfig(variant="vpt_deep", p=2), backbone, RngStream(2))
        img = RngStream(3).normal((3, 8, 8))
        plain = bb.extract_feature(img, backbone, TINY).data
        hooked = bb.extract_feature(img, backbone, TINY, hooks=state).data
        assert not np.array_equal(plain, hooked)


class TestSequenceShapes:
    def test_vpt_deep_keeps_length(self):
        p = 3
        backbone = make_backbone(4)
        state = peft.attach(peft.PeftConfig(variant="vpt_deep", p=p), backbone, RngStream(5))
        x = Tensor(RngStream(6).normal((2, TINY.seq_len, TINY.dim)))
        for layer in range(TINY.depth):
            x = state.adjust_sequence(layer, x)
            assert x.shape == (2, TINY.seq_len + p, TINY.dim)
            x = bb.block_forward(x, backbone, layer, TINY, hooks=state)

    def test_vpt_shallow_only_first_layer(self):
        p = 2
        backbone = make_backbone(4)
        state = peft.attach(peft.PeftConfig(variant="vpt_shallow", p=p), backbone, RngStream(5))
        x = Tensor(RngStream(6).normal((TINY.seq_len, TINY.dim)))
        x = state.adjust_sequence(0, x)
        assert x.shape == (TINY.seq_len + p, TINY.dim)
        assert state.adjust_sequence(1, x) is x

    def test_class_token_row_preserved(self):
        backbone = make_backbone(4)
        state = peft.attach(peft.PeftConfig(variant="vpt_deep", p=2), backbone, RngStream(5))
        x = Tensor(RngStream(6).normal((TINY.seq_len, TINY.dim)))
        out = state.adjust_sequence(0, x)
        np.testing.assert_array_equal(out.data[0], x.data[0])


class TestCensus:
    B16 = bb.VIT_B16

    @pytest.mark.parametrize("r,expected", [(32, 617_868), (8, 175_212), (256, 4_749_324), (4, 101_436)])
    def test_adaptformer_paper_presets(self, r, expected):
        cfg = peft.PeftConfig(variant="adaptformer", r=r)
        assert peft.count_peft_params(cfg, self.B16) == expected

    @pytest.mark.parametrize("variant,kw", [
        ("none", {}),
        ("ln_tuning", {}),
        ("bitfit", {}),
        ("vpt_shallow", {"p": 5}),
        ("vpt_deep", {"p": 3}),
        ("adapter", {"r": 4}),
        ("lora", {"r": 4}),
        ("lora", {"r": 4, "lora_targets": ("q",)}),
        ("adaptformer", {"r": 4}),
    ])
    def test_closed_form_equals_enumeration(self, variant, kw):
        rng = RngStream(7)
        for seed, (depth, dim, heads) in enumerate([(1, 8, 2), (2, 32, 4), (3, 12, 3)]):
            vit = bb.ViTConfig(image_size=8, patch_size=4, depth=depth, dim=dim, heads=heads)
            backbone = bb.BackboneParams.init_random(vit, RngStream(seed))
            bb.set_trainable(backbone, "frozen")
            state = peft.attach(peft.PeftConfig(variant=variant, **kw), backbone, rng)
            assert state.trainable_count() == peft.count_peft_params(state.config, vit)
            assert peft.enumerate_peft_params(state.config, vit) == state.trainable_count()
            attached = {n for n, _ in state.trainable_params()}
            assert attached == set(peft.peft_tensor_shapes(state.config, vit))


class TestFreezeSemantics:
    def test_bitfit_unfreezes_only_biases(self):
        backbone = make_backbone(8)
        state = peft.attach(peft.PeftConfig(variant="bitfit"), backbone, RngStream(9))
        trainable = {n for n, t in backbone.named_tensors() if t.requires_grad}
        assert trainable == set(state.unfrozen_backbone)
        assert all(n.split(".")[-1].startswith("b") for n in trainable)
        assert len(trainable) == 8 * TINY.depth

    def test_ln_tuning_unfreezes_block_lns(self):
        backbone = make_backbone(8)
        peft.attach(peft.PeftConfig(variant="ln_tuning"), backbone, RngStream(9))
        trainable = {n for n, t in backbone.named_tensors() if t.requires_grad}
        assert trainable == {
            f"block.{l}.{s}" for l in range(TINY.depth) for s in peft.LN_TUNING_SUFFIXES
        }

    def test_owned_variants_leave_backbone_frozen(self):
        for variant, kw in [("adapter", {"r": 2}), ("lora", {"r": 2}),
                            ("adaptformer", {"r": 2}), ("vpt_deep", {"p": 2})]:
            backbone = make_backbone(8)
            peft.attach(peft.PeftConfig(variant=variant, **kw), backbone, RngStream(9))
            assert not any(t.requires_grad for _, t in backbone.named_tensors())


class TestLearnedScales:
    def test_fresh_attach_all_init_value(self):
        backbone = make_backbone(10)
        state = peft.attach(peft.PeftConfig(variant="adaptformer", r=2), backbone, RngStream(11))
        scales = peft.learned_scales(state)
        assert scales == [float(np.float32(peft.SCALE_INIT))] * TINY.depth

    def test_other_variant_rejected(self):
        backbone = make_backbone(10)
        state = peft.attach(peft.PeftConfig(variant="lora", r=2), backbone, RngStream(11))
        with pytest.raises(ValueError):
            peft.learned_scales(state)


class TestGradientsThroughHooks:
    """Block + each variant against the finite-difference oracle (float64)."""

    CFG = bb.ViTConfig(image_size=4, patch_size=2, depth=1, dim=8, heads=2)

    def _check(self, variant, kw, seeds=range(3)):
        for seed in seeds:
            backbone = bb.BackboneParams.init_random(self.CFG, RngStream(40 + seed), dtype=np.float64)
            bb.set_trainable(backbone, "frozen")
            state = peft.attach(peft.PeftConfig(variant=variant, **kw), backbone, RngStream(50 + seed), dtype=np.float64)
            # make zero-initialized tensors non-degenerate for the check
            for name, t in state.owned.items():
                if not np.any(t.data):
                    repl = RngStream(60 + seed).normal(t.shape, 0.3, dtype=np.float64)
                    state.owned[name] = Tensor(repl, requires_grad=True)
            x0 = RngStream(70 + seed).normal((5, self.CFG.dim), dtype=np.float64)
            owned_names = list(state.owned)

            def f(t):
                for i, n in enumerate(owned_names):
                    state.owned[n] = t[f"p{i}"]
                x = state.adjust_sequence(0, t["x"])
                return sum_(bb.block_forward(x, backbone, 0, self.CFG, hooks=state))

            ins = {f"p{i}": state.owned[n].data for i, n in enumerate(owned_names)}
            ins["x"] = x0
            check_gradients(f, ins)

    def test_adapter(self):
        self._check("adapter", {"r": 2})

    def test_adaptformer(self):
        self._check("adaptformer", {"r": 2})

    def test_lora(self):
        self._check("lora", {"r": 2})

    def test_vpt_deep(self):
        self._check("vpt_deep", {"p": 2})

    def test_bitfit_gradients_reach_biases(self):
        backbone = bb.BackboneParams.init_random(self.CFG, RngStream(1), dtype=np.float64)
        bb.set_trainable(backbone, "frozen")
        state = peft.attach(peft.PeftConfig(variant="bitfit"), backbone, RngStream(2), dtype=np.float64)
        x = Tensor(RngStream(3).normal((4, self.CFG.dim), dtype=np.float64))
        backward(sum_(bb.block_forward(x, backbone, 0, self.CFG, hooks=state)))
        for name in state.unfrozen_backbone:
            assert backbone[name].grad is not None, name
