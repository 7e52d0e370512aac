"""Backbone tests: patch embedding, position interpolation, forward trace."""

import math

import numpy as np
import pytest
import torch

from toco.vit import (
    ForwardTrace,
    NonFiniteActivationError,
    PatchEmbed,
    TokenGrid,
    VitConfig,
    ViTEncoder,
    class_attention_map,
    interpolate_pos_embed,
)


def small_config(**kw):
    base = dict(image_size=16, patch_size=8, depth=2, dim=8, heads=2,
                mlp_ratio=2.0, aux_block=1)
    base.update(kw)
    return VitConfig(**base)


class TestVitConfig:
    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            VitConfig(image_size=65, patch_size=8)
        with pytest.raises(ValueError):
            small_config(aux_block=3)
        with pytest.raises(ValueError):
            small_config(dim=9, heads=2)

    def test_grid(self):
        assert small_config().grid == (2, 2)
        assert small_config().num_patches == 4


class TestPatchify:
    def test_shape_arithmetic(self):
        embed = PatchEmbed(patch_size=4, dim=5, in_channels=1)
        grid = embed(torch.randn(1, 8, 8))
        assert grid.grid == (2, 2)
        assert grid.tokens.shape == (1, 4, 5)

    def test_constant_image_identity_weights(self):
        # with identity weights every token is v * (row sums of the basis)
        embed = PatchEmbed(patch_size=2, dim=12, in_channels=3)
        with torch.no_grad():
            embed.proj.weight.copy_(torch.eye(12))
            embed.proj.bias.zero_()
        v = 0.37
        grid = embed(torch.full((3, 4, 4), v))
        assert torch.allclose(grid.tokens, torch.full_like(grid.tokens, v))
        assert torch.allclose(grid.tokens[0, 0], grid.tokens[0, 3])

    def test_matches_flatten_and_multiply_oracle(self):
        torch.manual_seed(3)
        p, dim = 8, 6
        embed = PatchEmbed(patch_size=p, dim=dim).double()
        img = torch.rand(3, 16, 16, dtype=torch.float64)
        grid = embed(img)
        w = embed.proj.weight.detach().numpy()
        b = embed.proj.bias.detach().numpy()
        expected = np.zeros((4, dim))
        idx = 0
        for gi in range(2):
            for gj in range(2):
                patch = img[:, gi * p : (gi + 1) * p, gj * p : (gj + 1) * p]
                expected[idx] = w @ patch.numpy().reshape(-1) + b
                idx += 1
        np.testing.assert_allclose(grid.tokens[0].detach().numpy(), expected, atol=1e-12)

    def test_indivisible_image_rejected(self):
        embed = PatchEmbed(patch_size=8, dim=4)
        with pytest.raises(ValueError, match="divisible"):
            embed(torch.randn(3, 20, 16))


class TestInterpolatePosEmbed:
    def test_identity_when_grids_match(self):
        pos = torch.randn(10, 7)
        out = interpolate_pos_embed(pos, (3, 3), (3, 3), num_prefix=1)
        assert torch.equal(out, pos)

    def test_one_by_one_replicates(self):
        pos = torch.randn(1, 5)
        out = interpolate_pos_embed(pos, (1, 1), (4, 4))
        assert out.shape == (16, 5)
        assert torch.allclose(out, pos.expand(16, 5))

    def test_center_of_3x3_is_corner_mean(self):
        pos = torch.randn(4, 6)
        out = interpolate_pos_embed(pos, (2, 2), (3, 3))
        center = out.reshape(3, 3, 6)[1, 1]
        assert torch.allclose(center, pos.mean(dim=0), atol=1e-6)

    def test_prefix_rows_pass_through(self):
        pos = torch.randn(5, 3)
        out = interpolate_pos_embed(pos, (2, 2), (4, 4), num_prefix=1)
        assert torch.equal(out[0], pos[0])
        assert out.shape == (17, 3)

    def test_wrong_row_count_rejected(self):
        with pytest.raises(ValueError, match="rows"):
            interpolate_pos_embed(torch.randn(5, 3), (2, 2), (3, 3))


class TestForward:
    def test_zeroed_attention_path_is_residual_identity(self):
        cfg = small_config(depth=1)
        torch.manual_seed(0)
        enc = ViTEncoder(cfg)
        block = enc.blocks[0]
        with torch.no_grad():
            d = cfg.dim
            block.attn.qkv.weight[2 * d :].zero_()  # value projection
            block.attn.qkv.bias[2 * d :].zero_()
            block.attn.proj.weight.zero_()
            block.attn.proj.bias.zero_()
            block.mlp.fc2.weight.zero_()
            block.mlp.fc2.bias.zero_()
        img = torch.rand(2, 3, 16, 16)
        trace = enc(img)
        embedded = enc.patch_embed(img).tokens
        pos = enc.pos_embed
        expected = embedded + pos[1:].unsqueeze(0)
        assert torch.allclose(trace.final_tokens.tokens, expected, atol=1e-6)

    def test_attention_rows_sum_to_one(self):
        torch.manual_seed(1)
        enc = ViTEncoder(small_config())
        trace = enc(torch.rand(2, 3, 16, 16))
        assert len(trace.attentions) == 2
        for attn in trace.attentions:
            sums = attn.sum(dim=-1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)

    def test_trace_shapes_and_depth(self):
        torch.manual_seed(2)
        cfg = small_config(depth=3, aux_block=2)
        enc = ViTEncoder(cfg)
        trace = enc(torch.rand(2, 3, 16, 16))
        assert trace.depth == 3
        for grid in trace.tokens:
            assert grid.tokens.shape == (2, 4, cfg.dim)
        for cls in trace.cls_tokens:
            assert cls.shape == (2, cfg.dim)
        assert trace.block_tokens(2) is trace.tokens[1]
        with pytest.raises(IndexError):
            trace.block_tokens(4)

    def test_variable_input_size(self):
        # n = (H/p)(W/p) patch tokens at every block, any divisible size
        torch.manual_seed(3)
        enc = ViTEncoder(small_config())
        for size in (8, 16, 24):
            trace = enc(torch.rand(1, 3, size, size))
            n = (size // 8) ** 2
            assert all(g.tokens.shape[1] == n for g in trace.tokens)

    def test_depth1_matches_numpy_transcription(self):
        # independent float64 re-implementation of one block
        cfg = VitConfig(image_size=8, patch_size=4, depth=1, dim=4, heads=1,
                        mlp_ratio=2.0, aux_block=1)
        torch.manual_seed(4)
        enc = ViTEncoder(cfg).double()
        img = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        trace = enc(img)

        def ln(x, w, b):
            mean = x.mean(axis=-1, keepdims=True)
            var = x.var(axis=-1, keepdims=True)
            return (x - mean) / np.sqrt(var + 1e-5) * w + b

        def gelu(x):
            from scipy.special import erf
            return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))

        def softmax(x):
            e = np.exp(x - x.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)

        p = {k: v.detach().numpy() for k, v in enc.state_dict().items()}
        patches = np.zeros((4, 48))
        idx = 0
        for gi in range(2):
            for gj in range(2):
                patches[idx] = img[0, :, gi * 4 : gi * 4 + 4, gj * 4 : gj * 4 + 4].numpy().reshape(-1)
                idx += 1
        tok = patches @ p["patch_embed.proj.weight"].T + p["patch_embed.proj.bias"]
        x = np.concatenate([p["cls_token"][0], tok], axis=0) + p["pos_embed"]

        h = ln(x, p["blocks.0.norm1.weight"], p["blocks.0.norm1.bias"])
        qkv = h @ p["blocks.0.attn.qkv.weight"].T + p["blocks.0.attn.qkv.bias"]
        q, k, v = qkv[:, :4], qkv[:, 4:8], qkv[:, 8:]
        attn = softmax(q @ k.T / math.sqrt(4))
        x = x + (attn @ v) @ p["blocks.0.attn.proj.weight"].T + p["blocks.0.attn.proj.bias"]
        h = ln(x, p["blocks.0.norm2.weight"], p["blocks.0.norm2.bias"])
        mlp = gelu(h @ p["blocks.0.mlp.fc1.weight"].T + p["blocks.0.mlp.fc1.bias"])
        x = x + mlp @ p["blocks.0.mlp.fc2.weight"].T + p["blocks.0.mlp.fc2.bias"]

        np.testing.assert_allclose(trace.cls_tokens[0][0].detach().numpy(), x[0], atol=1e-9)
        np.testing.assert_allclose(trace.final_tokens.tokens[0].detach().numpy(), x[1:], atol=1e-9)
        np.testing.assert_allclose(trace.attentions[0][0, 0].detach().numpy(), attn, atol=1e-9)

    def test_nonfinite_input_rejected(self):
        enc = ViTEncoder(small_config())
        img = torch.rand(1, 3, 16, 16)
        img[0, 0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteActivationError):
            enc(img)


class TestClassAttentionMap:
    def _trace_with(self, attn, grid):
        trace = ForwardTrace(grid=grid)
        trace.attentions.append(attn)
        trace.tokens.append(TokenGrid(torch.zeros(attn.shape[0], grid[0] * grid[1], 1), grid))
        trace.cls_tokens.append(torch.zeros(attn.shape[0], 1))
        return trace

    def test_uniform_attention_gives_constant_map(self):
        n = 4
        attn = torch.full((1, 2, n + 1, n + 1), 1.0 / (n + 1))
        amap = class_attention_map(self._trace_with(attn, (2, 2)), 1)
        assert torch.allclose(amap, torch.full((1, 2, 2), 1.0 / (n + 1)))

    def test_dominant_key_concentrates_mass(self):
        logits = torch.zeros(1, 1, 5, 5)
        logits[0, 0, 0, 3] = 40.0
        attn = logits.softmax(dim=-1)
        amap = class_attention_map(self._trace_with(attn, (2, 2)), 1)
        assert amap[0].reshape(-1)[2] > 0.999

    def test_matches_head_mean_oracle(self):
        torch.manual_seed(5)
        attn = torch.rand(2, 3, 5, 5).softmax(dim=-1)
        amap = class_attention_map(self._trace_with(attn, (2, 2)), 1)
        expected = attn[:, :, 0, 1:].mean(dim=1).reshape(2, 2, 2)
        oracle = np.zeros((2, 2, 2))
        a = attn.numpy()
        for b in range(2):
            for t in range(4):
                oracle[b, t // 2, t % 2] = a[b, :, 0, 1 + t].mean()
        np.testing.assert_allclose(amap.numpy(), oracle, atol=1e-7)
        assert torch.allclose(amap, expected)
        assert (amap >= 0).all() and (amap <= 1).all()
