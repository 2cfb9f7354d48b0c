import numpy as np
import pytest

from parlab import tensor as T
from parlab.tensor import Tensor, grad_check
from parlab.vim import (VIM_PRESETS, ConfigError, MambaBlock, PatchEmbed, PatchEmbedConfig,
                        VimBackbone, VimConfig, add_positional, patchify)


def small_cfg(**kw):
    base = dict(depth=2, dim=8, d_state=2, patch=4, height=8, width=16)
    base.update(kw)
    return VimConfig(**base)


class TestPatchEmbed:
    """Image to patch tokens."""

    def test_token_count(self):
        assert PatchEmbedConfig(height=32, width=16, patch=8).num_tokens == 8

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            PatchEmbedConfig(height=30, width=16, patch=8)

    def test_zero_image_zero_tokens(self, rng):
        pe = PatchEmbed(PatchEmbedConfig(16, 8, 4, 6), rng)
        pe.proj.bias.data[...] = 0.0
        out = pe(np.zeros((2, 3, 16, 8)))
        assert out.shape == (2, 8, 6) and not out.data.any()

    def test_row_major_order(self):
        img = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        patches = patchify(img, 2)
        assert patches[:, 0].tolist() == [0.0, 2.0, 8.0, 10.0]

    def test_pixel_recovery(self, rng):
        pe = PatchEmbed(PatchEmbedConfig(4, 6, 1, 1), rng)
        pe.proj.weight.data[...] = [[0.0], [1.0], [0.0]]
        pe.proj.bias.data[...] = 0.0
        img = rng.uniform(size=(3, 4, 6))
        out = pe(img[None]).data[0, :, 0]
        np.testing.assert_array_equal(out, img[1].reshape(-1))


class TestPositional:
    """Additive positional table."""

    def test_zero_pe_identity(self, rng):
        x = Tensor(rng.normal(size=(5, 3)))
        np.testing.assert_array_equal(add_positional(x, Tensor(np.zeros((5, 3)))).data, x.data)

    def test_zero_tokens_return_pe(self, rng):
        pe = Tensor(rng.normal(size=(5, 3)))
        np.testing.assert_array_equal(add_positional(Tensor(np.zeros((5, 3))), pe).data, pe.data)

    def test_batch_commutes(self, rng):
        x = rng.normal(size=(4, 5, 3))
        pe = Tensor(rng.normal(size=(5, 3)))
        batched = add_positional(Tensor(x), pe).data
        for i in range(4):
            np.testing.assert_array_equal(batched[i], add_positional(Tensor(x[i]), pe).data)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            add_positional(Tensor(np.zeros((4, 3))), Tensor(np.zeros((5, 3))))


class TestMambaBlock:
    """Bidirectional Mamba block."""

    def test_zero_input_zero_output(self, rng):
        block = MambaBlock(small_cfg(), rng)
        block.in_proj.bias.data[...] = 0.0
        block.out_proj.bias.data[...] = 0.0
        out = block(Tensor(np.zeros((6, 8))))
        assert not out.data.any()

    @pytest.mark.parametrize("shape", [(1, 8), (5, 8), (3, 7, 8)])
    def test_shape_preserved(self, shape, rng):
        assert MambaBlock(small_cfg(), rng)(Tensor(rng.normal(size=shape))).shape == shape

    def test_tied_reversal_equivariance(self, rng):
        block = MambaBlock(small_cfg(), rng)
        block.tie_branches()
        x = rng.normal(size=(2, 9, 8))
        y = block(Tensor(x)).data
        y_rev = block(Tensor(x[:, ::-1])).data
        assert np.abs(y_rev - y[:, ::-1]).max() < 1e-10

    def test_branch_causality(self, rng):
        block = MambaBlock(small_cfg(), rng)
        x = rng.normal(size=(10, 8))
        f0, b0, _ = block.branches(Tensor(x))
        t = 6
        x[t] += 1.0
        f1, b1, _ = block.branches(Tensor(x))
        np.testing.assert_array_equal(f0.data[:t], f1.data[:t])
        np.testing.assert_array_equal(b0.data[t + 1:], b1.data[t + 1:])
        assert np.abs(f0.data[t:] - f1.data[t:]).max() > 0
        assert np.abs(b0.data[:t + 1] - b1.data[:t + 1]).max() > 0

    def test_unidirectional_has_no_backward_branch(self, rng):
        block = MambaBlock(small_cfg(), rng, bidirectional=False)
        assert block.bwd is None
        assert all(not n.startswith("bwd") for n, _ in block.named_parameters())

    def test_branches_same_structure(self, rng):
        block = MambaBlock(small_cfg(), rng)
        fwd = [(n, p.shape) for n, p in block.fwd.named_parameters()]
        bwd = [(n, p.shape) for n, p in block.bwd.named_parameters()]
        assert fwd == bwd

    def test_a_init(self, rng):
        block = MambaBlock(small_cfg(d_state=4), rng)
        A = -np.exp(block.fwd.ssm.A_log.data)
        np.testing.assert_allclose(A[0], [-1, -2, -3, -4])


class TestBackbone:
    """Stacked Vim encoder."""

    def test_single_block_composition(self, rng):
        cfg = small_cfg(depth=1)
        bb = VimBackbone(cfg, rng)
        img = rng.uniform(size=(2, 3, 8, 16))
        manual = bb.norm(bb.blocks[0](add_positional(bb.patch_embed(img), bb.pos_embed)))
        np.testing.assert_array_equal(bb(img).data, manual.data)

    def test_deterministic(self):
        cfg = small_cfg()
        img = np.random.default_rng(1).uniform(size=(2, 3, 8, 16))
        a = VimBackbone(cfg, np.random.default_rng(5))(img).data
        b = VimBackbone(cfg, np.random.default_rng(5))(img).data
        assert np.array_equal(a, b)

    def test_token_count_constant(self, rng):
        bb = VimBackbone(small_cfg(depth=3), rng)
        out, layers = bb(rng.uniform(size=(1, 3, 8, 16)), return_layers=True)
        assert out.shape == (1, 8, 8)
        assert [l.shape for l in layers] == [(1, 8, 8)] * 3

    def test_grad_check(self, rng):
        cfg = small_cfg(depth=2, dim=8, d_state=2, patch=4, height=8, width=16)
        bb = VimBackbone(cfg, rng)
        img = rng.uniform(size=(1, 3, 8, 16))
        tokens = Tensor(bb.embed(img).data)
        w = Tensor(rng.normal(size=(1, 8, 8)))
        b0, b1 = bb.blocks
        params = [tokens, b0.in_proj.weight, b0.fwd.ssm.A_log, b0.bwd.ssm.dt_proj.bias,
                  b1.fwd.conv_w, b1.bwd.ssm.x_proj.weight, b1.fwd.ssm.D, b0.out_proj.weight,
                  bb.norm.weight]
        # several SSM gradients sit near 1e-9, below difference-quotient resolution,
        # so they are judged on an absolute 1e-6 scale
        err = grad_check(lambda: (bb.forward_tokens(tokens) * w).sum(), params,
                         h=1e-3, floor=1e-6, order=4)
        assert err < 1e-4

    def test_no_dead_parameters(self, rng):
        bb = VimBackbone(small_cfg(), rng)
        img = rng.uniform(size=(2, 3, 8, 16))
        w = Tensor(rng.normal(size=(2, 8, 8)))
        (bb(img) * w).sum().backward()
        total = alive = 0
        for name, p in bb.named_parameters():
            assert p.grad is not None, name
            total += p.size
            alive += int((p.grad != 0).sum())
        assert alive / total >= 0.99

    def test_zero_depth_rejected(self, rng):
        with pytest.raises(ConfigError):
            VimBackbone(small_cfg(depth=0), rng)

    def test_presets(self):
        tiny = VIM_PRESETS["vim-tiny"]
        assert (tiny.depth, tiny.dim, tiny.inner, tiny.d_state, tiny.patch) == (4, 64, 128, 8, 8)
        assert (tiny.height, tiny.width) == (64, 32)
        assert (VIM_PRESETS["vim-micro"].depth, VIM_PRESETS["vim-micro"].dim) == (2, 32)
        assert (VIM_PRESETS["vim-s"].depth, VIM_PRESETS["vim-s"].dim) == (24, 384)

    def test_float32_forward(self, rng):
        with T.default_dtype(np.float32):
            bb = VimBackbone(small_cfg(), rng)
            out = bb(rng.uniform(size=(1, 3, 8, 16)).astype(np.float32))
        assert out.dtype == np.float32
