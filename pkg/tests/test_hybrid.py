import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parlab import tensor as T
from parlab.head import LossWeights
from parlab.hybrid import (NASF, VARIANTS, DistillLossConfig, HybridConfigError, MaHDFT, TokenReducer,
                           average_probs, binary_kl, build_hybrid, distill_loss)
from parlab.models import VitClassifier, model_loss
from parlab.nn import randomize_, zero_
from parlab.tensor import Tensor
from parlab.vim import VimConfig
from parlab.vit import VitConfig

VIM = VimConfig(depth=4, dim=8, d_state=2, patch=4, height=8, width=16)
VIT = VitConfig(depth=2, dim=12, heads=2, patch=4, height=8, width=16)
ATTRS = 3


def teacher(seed=0):
    return VitClassifier(VIT, ATTRS, np.random.default_rng(seed)).freeze()


def make(variant, rng, **kw):
    t = teacher() if variant in "egh" else None
    return build_hybrid(variant, VIM, VIT, 2, ATTRS, rng, teacher=t, reduce_grid=(1, 2), **kw)


def batch(rng, n=2):
    return rng.uniform(size=(n, 3, 8, 16)), rng.integers(0, 2, size=(n, ATTRS))


class TestConstruction:
    """Layer-count validation and teacher requirements."""

    def test_compatible_counts(self, rng):
        build_hybrid("a", VimConfig(depth=4, dim=8, patch=4, height=8, width=16), VIT, 2, ATTRS, rng)

    def test_incompatible_counts(self, rng):
        with pytest.raises(HybridConfigError, match="vim_depth == ratio"):
            build_hybrid("a", VimConfig(depth=3, dim=8, patch=4, height=8, width=16), VIT, 2, ATTRS, rng)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.sampled_from("acdf"))
    def test_ratio_rule(self, vim_depth, vit_depth, ratio, variant):
        vim = VimConfig(depth=vim_depth, dim=4, d_state=1, patch=4, height=4, width=4)
        vit = VitConfig(depth=vit_depth, dim=4, heads=1, patch=4, height=4, width=4)
        rng = np.random.default_rng(0)
        if vim_depth == ratio * vit_depth:
            build_hybrid(variant, vim, vit, ratio, 2, rng)
        else:
            with pytest.raises(HybridConfigError):
                build_hybrid(variant, vim, vit, ratio, 2, rng)

    @pytest.mark.parametrize("variant", ["e", "g", "h"])
    def test_missing_teacher(self, variant, rng):
        with pytest.raises(HybridConfigError, match="missing teacher_ckpt"):
            build_hybrid(variant, VIM, VIT, 2, ATTRS, rng)

    def test_unfrozen_teacher_rejected(self, rng):
        with pytest.raises(HybridConfigError, match="frozen"):
            build_hybrid("e", VIM, VIT, 2, ATTRS, rng,
                         teacher=VitClassifier(VIT, ATTRS, rng), freeze_teacher=False)

    def test_optimizer_excludes_teacher(self, rng):
        model = make("e", rng)
        teacher_ids = {id(p) for p in model.teacher.parameters()}
        assert teacher_ids
        assert not teacher_ids & {id(p) for p in model.trainable_parameters()}

    def test_unknown_variant(self, rng):
        with pytest.raises(HybridConfigError):
            build_hybrid("z", VIM, VIT, 2, ATTRS, rng)

    def test_nasf_tail_depth(self):
        assert [NASF.tail_depth(n) for n in (1, 2, 3, 4, 12)] == [1, 1, 1, 2, 4]

    def test_asf_unit_count(self, rng):
        assert make("c", rng).units == VIM.depth // 2


class TestShapes:
    """Every variant maps an image batch to one probability per attribute."""

    @pytest.mark.parametrize("variant", sorted(VARIANTS))
    def test_output_shape(self, variant, rng):
        images, _ = batch(rng, 3)
        out = make(variant, rng)(images)
        assert out.probs.shape == (3, ATTRS)
        assert np.all((out.probs.data > 0) & (out.probs.data < 1))


class TestZeroInitCollapse:
    """Zeroed bridges reduce (a), (d), (f), (h) to their plain backbones bitwise."""

    def test_pafusion(self, rng):
        model = make("a", rng)
        for ad in model.adapters:
            zero_(ad.up)
        images, _ = batch(rng)
        feats, _, _ = model.features(images)
        assert np.array_equal(feats.data, model.vit(images).data)

    def test_maformer(self, rng):
        model = make("d", rng)
        images, _ = batch(rng)
        feats, _, _ = model.features(images)
        assert np.array_equal(feats.data, model.vit(images).data)

    def test_adamtf(self, rng):
        model = make("f", rng)
        images, _ = batch(rng)
        _, extras, _ = model.features(images)
        assert np.array_equal(extras["vim_stream"].data, model.vim(images).data)
        assert np.array_equal(extras["vit_stream"].data, model.vit(images).data)

    def test_makdf(self, rng):
        model = make("h", rng)
        images, _ = batch(rng)
        feats, _, _ = model.features(images)
        assert np.array_equal(feats.data, model.vim(images).data)


class TestFrozenTeacher:
    """Teacher weights never move and never collect gradient."""

    @pytest.mark.parametrize("variant", ["e", "g", "h"])
    def test_five_adam_steps(self, variant, rng):
        model = make(variant, rng)
        for b in getattr(model, "bridges", lambda: [])():
            randomize_(b, rng)
        before = {k: v.copy() for k, v in model.teacher.state_dict().items()}
        opt = T.Adam(model.trainable_parameters(), lr=1e-2)
        images, labels = batch(rng)
        for _ in range(5):
            opt.zero_grad()
            model_loss(model(images), labels, LossWeights.from_labels(labels)).backward()
            opt.step()
        for name, p in model.teacher.named_parameters():
            assert p.grad is None or not p.grad.any(), name
            assert np.array_equal(p.data, before[name]), name


class TestGradientAudit:
    """With bridges randomized, every trainable tensor receives gradient."""

    @pytest.mark.parametrize("variant", sorted(VARIANTS))
    def test_no_dead_subgraphs(self, variant, rng):
        kw = {"distill": DistillLossConfig(mode="feature")} if variant == "g" else {}
        model = make(variant, rng, **kw)
        for b in getattr(model, "bridges", lambda: [])():
            randomize_(b, rng)
        images, labels = batch(rng)
        model_loss(model(images), labels, LossWeights.from_labels(labels)).backward()
        total = alive = 0
        for name, p in model.named_parameters():
            if not p.requires_grad:
                continue
            assert p.grad is not None, name
            total += p.size
            alive += int((p.grad != 0).sum())
        assert alive / total >= 0.99

    def test_pafusion_reaches_both_backbones(self, rng):
        model = make("a", rng)
        images, labels = batch(rng)
        model_loss(model(images), labels, None).backward()
        assert np.abs(model.vim.blocks[0].in_proj.weight.grad).max() > 0
        assert np.abs(model.vit.blocks[0].attn.qkv.weight.grad).max() > 0


class TestNASF:
    """(b) serial composition."""

    def test_manual_composition(self, rng):
        vim = VimConfig(depth=1, dim=8, d_state=2, patch=4, height=8, width=16)
        vit = VitConfig(depth=1, dim=12, heads=2, patch=4, height=8, width=16)
        model = build_hybrid("b", vim, vit, 1, ATTRS, rng)
        images, _ = batch(rng)
        x = model.vim.blocks[0](model.vim.embed(images))
        manual = model.norm(model.tail[0](model.adapter.up(x)))
        feats, _, _ = model.features(images)
        np.testing.assert_array_equal(feats.data, manual.data)


class TestMaHDFT:
    """(e) dense fusion of teacher layers."""

    def test_token_math(self, rng):
        t = VitClassifier(VitConfig(depth=4, dim=8, heads=2, patch=4, height=16, width=16),
                          ATTRS, rng).freeze()
        vim = VimConfig(depth=2, dim=8, d_state=2, patch=4, height=16, width=16)
        model = MaHDFT(vim, t, ATTRS, rng, reduce_grid=(2, 2))
        assert model.fusion_length == 16

    def test_full_scale_token_count(self, rng):
        reducer = TokenReducer((14, 14), (7, 7), 8, 8, rng)
        assert 12 * reducer.num_tokens == 588

    @pytest.mark.parametrize("mode", ["pool", "conv"])
    def test_reducer(self, mode, rng):
        red = TokenReducer((2, 4), (1, 2), 3, 5, rng, mode=mode)
        assert red(Tensor(rng.normal(size=(2, 8, 3)))).shape == (2, 2, 5)

    def test_pool_reducer_averages_windows(self, rng):
        red = TokenReducer((2, 2), (1, 1), 2, 2, rng)
        red.proj.weight.data[...] = np.eye(2)
        red.proj.bias.data[...] = 0.0
        x = rng.normal(size=(1, 4, 2))
        np.testing.assert_allclose(red(Tensor(x)).data[0, 0], x[0].mean(0), atol=1e-15)

    def test_equal_logits_average_is_exact(self, rng):
        logits = Tensor(rng.normal(size=(4, ATTRS)) * 3)
        np.testing.assert_array_equal(average_probs(logits, logits).data, T.sigmoid(logits).data)

    def test_outputs(self, rng):
        model = make("e", rng)
        images, _ = batch(rng)
        out = model(images)
        p = (T.sigmoid(out.extras["logits_vit"]).data + T.sigmoid(out.extras["logits_vim"]).data) / 2
        np.testing.assert_allclose(out.probs.data, p, atol=1e-15)
        assert len(out.task_probs) == 2


class TestDistillation:
    """Feature MSE and temperature-scaled binary KL."""

    def test_logit_zero_when_equal(self, rng):
        logits = Tensor(rng.normal(size=(3, 4)))
        cfg = DistillLossConfig("logit", temperature=2.0)
        assert abs(distill_loss(None, logits, None, logits.data, cfg).item()) < 1e-12

    def test_binary_kl_hand_case(self):
        kl = binary_kl(np.array([[50.0]]), Tensor([[0.0]]), 1.0).item()
        # teacher clamps to 1 - 1e-7
        assert abs(kl - math.log(2)) < 1e-4

    def test_binary_kl_unclamped_value(self):
        pt, ps = 0.8, 0.5
        want = pt * math.log(pt / ps) + (1 - pt) * math.log((1 - pt) / (1 - ps))
        got = binary_kl(np.array([[math.log(4.0)]]), Tensor([[0.0]]), 1.0).item()
        assert abs(got - want) < 1e-12

    def test_temperature_scaling(self):
        t, s = np.array([[2.0, -1.0]]), Tensor([[0.5, 0.5]])
        tau = 3.0
        manual = binary_kl(t / tau, s * (1 / tau), 1.0).item() * tau ** 2
        assert abs(binary_kl(t, s, tau).item() - manual) < 1e-12

    def test_feature_zero_when_equal(self, rng):
        f = Tensor(rng.normal(size=(2, 4, 5)))
        cfg = DistillLossConfig("feature")
        assert distill_loss([f], None, [f.data.copy()], None, cfg).item() == 0.0

    def test_feature_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            distill_loss([Tensor(np.zeros((2, 3)))], None, [np.zeros((2, 4))], None,
                         DistillLossConfig("feature"))

    def test_kl_grad(self, rng):
        s = Tensor(rng.normal(size=(2, 3)))
        t = rng.normal(size=(2, 3))
        assert T.grad_check(lambda: binary_kl(t, s, 2.0), [s]) < 1e-6

    def test_bad_config(self):
        with pytest.raises(HybridConfigError.__mro__[1]):
            DistillLossConfig("attention")
        with pytest.raises(HybridConfigError.__mro__[1]):
            DistillLossConfig("logit", temperature=0.0)

    def test_kdtm_aux_weighting(self, rng):
        model = build_hybrid("g", VIM, VIT, 2, ATTRS, rng, teacher=teacher(),
                             distill=DistillLossConfig("logit", 2.0, 0.5))
        out = model(batch(rng)[0])
        assert abs(out.aux_loss.item() - 0.5 * out.extras["distill"].item()) < 1e-15

    def test_kdtm_feature_pairs(self, rng):
        model = build_hybrid("g", VIM, VIT, 2, ATTRS, rng, teacher=teacher(),
                             distill=DistillLossConfig("feature"))
        assert model.pairs() == [(1, 0), (3, 1)]
