import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from models.lgnet import (
    FusionBlock,
    LanguageAttention,
    LanguageFusionBlock,
    OutputBlock,
    ResidualUBlock,
    TargetMLP,
    fusion_block,
    gap,
    interleave,
    language_attention,
    language_fusion,
    output_block,
    residual_ublock_forward,
    target_mlp,
)
from utils.exceptions import ConfigError, ModelStageError, ShapeError


def zero_parameters(module: nn.Module):
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                m.weight.zero_()
                if m.bias is not None:
                    m.bias.zero_()


class TestResidualUBlock:
    def test_zero_propagation(self):
        torch.manual_seed(0)
        block = ResidualUBlock(8, 4, 8, height=4)
        zero_parameters(block)
        out = residual_ublock_forward(torch.zeros(8, 32, 32), 4, 4, 8, block=block)
        assert torch.count_nonzero(out) == 0

    def test_shape_contract(self):
        torch.manual_seed(0)
        out = residual_ublock_forward(torch.randn(8, 32, 32), height=4, mid_channels=8, out_channels=16)
        assert out.shape == (16, 32, 32)

    @pytest.mark.parametrize("height", [1, 2, 5])
    def test_odd_sizes_keep_resolution(self, height):
        torch.manual_seed(0)
        block = ResidualUBlock(3, 4, 6, height=height)
        out = block(torch.randn(2, 3, 19, 23))
        assert out.shape == (2, 6, 19, 23)

    def test_too_small_input(self):
        block = ResidualUBlock(1, 4, 4, height=5, name="E3")
        with pytest.raises(ModelStageError, match="too small for height"):
            block(torch.randn(2, 1, 8, 8))

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        block = ResidualUBlock(4, 4, 4, height=3).double().eval()
        x = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda t: block(t).sum(), (x,), eps=1e-6)

    def test_finite_output(self):
        torch.manual_seed(1)
        out = ResidualUBlock(2, 4, 4, height=3)(torch.randn(2, 2, 16, 16) * 10)
        assert torch.isfinite(out).all()


class TestGap:
    def test_constant_map(self):
        assert torch.allclose(gap(torch.full((3, 5, 5), 2.5)), torch.full((3,), 2.5))

    def test_single_channel_mean(self):
        x = torch.zeros(2, 2, 2)
        x[0, 1, 1] = 4.0
        assert gap(x)[0].item() == pytest.approx(1.0)

    def test_matches_naive_loop(self):
        torch.manual_seed(0)
        x = torch.randn(4, 3, 5, dtype=torch.float64)
        expected = [sum(x[c, i, j].item() for i in range(3) for j in range(5)) / 15 for c in range(4)]
        assert torch.allclose(gap(x), torch.tensor(expected, dtype=torch.float64))


class TestTargetMLP:
    def test_zero_descriptor_gives_bias(self):
        torch.manual_seed(0)
        mlp = TargetMLP(16, 8)
        with torch.no_grad():
            mlp.last.weight.zero_()
        out = target_mlp(torch.zeros(16), 8, mlp=mlp)
        assert torch.equal(out, mlp.last.bias.detach())

    def test_output_length(self):
        assert target_mlp(torch.randn(2, 512), 256).shape == (2, 256)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        mlp = TargetMLP(6, 4).double()
        td = torch.randn(6, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda t: mlp(t).sum(), (td,), eps=1e-6)


class TestInterleave:
    def test_pairs(self):
        out = interleave(torch.tensor([1.0, 3.0]), torch.tensor([2.0, 4.0]))
        assert out.tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_empty(self):
        assert interleave(torch.tensor([]), torch.tensor([])).numel() == 0

    def test_definition(self):
        out = interleave(torch.tensor([1, 3, 5]), torch.tensor([2, 4, 6]))
        assert out.tolist() == [1, 2, 3, 4, 5, 6]

    def test_batched(self):
        v1 = torch.tensor([[1, 3], [10, 30]])
        v2 = torch.tensor([[2, 4], [20, 40]])
        assert interleave(v1, v2).tolist() == [[1, 2, 3, 4], [10, 20, 30, 40]]

    def test_length_mismatch(self):
        with pytest.raises(ShapeError, match="length mismatch"):
            interleave(torch.zeros(3), torch.zeros(4))

    @given(st.lists(st.floats(-1e6, 1e6), max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_even_odd_positions(self, values):
        v1 = torch.tensor(values, dtype=torch.float64)
        v2 = -v1 - 1
        out = interleave(v1, v2)
        assert len(out) == 2 * len(values)
        assert torch.equal(out[0::2], v1)
        assert torch.equal(out[1::2], v2)


class TestLanguageAttention:
    def test_weights_in_open_interval(self):
        torch.manual_seed(0)
        block = LanguageAttention(8)
        for _ in range(20):
            w = language_attention(torch.randn(4, 8), torch.randn(4, 8), block=block)
            assert ((w > 0) & (w < 1)).all()

    def test_zero_conv_gives_half(self):
        block = LanguageAttention(4).eval()
        zero_parameters(block)
        w = language_attention(torch.randn(4), torch.randn(4), block=block)
        assert torch.allclose(w, torch.full((4,), 0.5))

    def test_order_sensitive(self):
        torch.manual_seed(0)
        block = LanguageAttention(4).eval()
        a = language_attention(torch.ones(4), torch.zeros(4), block=block)
        b = language_attention(torch.zeros(4), torch.ones(4), block=block)
        assert not torch.allclose(a, b)

    def test_odd_channels_rejected(self):
        with pytest.raises(ConfigError):
            LanguageAttention(5)

    def test_single_vector_training_batch(self):
        torch.manual_seed(0)
        block = LanguageAttention(4).train()
        w = block(torch.randn(1, 4), torch.randn(1, 4))
        assert torch.isfinite(w).all()


class TestLanguageFusion:
    def _block(self):
        torch.manual_seed(0)
        return LanguageFusionBlock(channels=4, descriptor_dim=8)

    def test_all_ones_attention_is_identity(self, monkeypatch):
        block = self._block()
        monkeypatch.setattr(block.attention, 'forward', lambda v1, v2: torch.ones_like(v1))
        feat = torch.randn(2, 4, 6, 6)
        assert torch.equal(block(feat, torch.randn(2, 8)), feat)

    def test_all_zeros_attention_annihilates(self, monkeypatch):
        block = self._block()
        monkeypatch.setattr(block.attention, 'forward', lambda v1, v2: torch.zeros_like(v1))
        out = block(torch.randn(2, 4, 6, 6), torch.randn(2, 8))
        assert torch.count_nonzero(out) == 0

    def test_per_channel_scalar_gating(self):
        block = self._block()
        feat = torch.rand(2, 4, 6, 6) + 0.5
        out = block(feat, torch.randn(2, 8))
        ratio = out / feat
        assert torch.allclose(ratio, ratio[..., :1, :1].expand_as(ratio), atol=1e-6)
        assert torch.allclose(ratio[..., 0, 0], block.last_weights)

    def test_function_builds_block(self):
        torch.manual_seed(0)
        out = language_fusion(torch.randn(2, 4, 6, 6), torch.randn(2, 8))
        assert out.shape == (2, 4, 6, 6)

    def test_function_uses_given_block(self):
        block = self._block()
        feat = torch.rand(2, 4, 6, 6) + 0.5
        out = language_fusion(feat, torch.randn(2, 8), block)
        assert torch.allclose(out, feat * block.last_weights[..., None, None])


class TestFusionBlock:
    def test_zero_inputs(self):
        torch.manual_seed(0)
        out = FusionBlock(4)(torch.zeros(2, 4, 8, 8), torch.zeros(2, 4, 8, 8))
        assert torch.count_nonzero(out) == 0

    def test_shape(self):
        torch.manual_seed(0)
        out = FusionBlock(32)(torch.randn(1, 32, 64, 64), torch.randn(1, 32, 64, 64))
        assert out.shape == (1, 32, 64, 64)

    def test_decomposition(self):
        torch.manual_seed(0)
        block = FusionBlock(4)
        enc, dec = torch.randn(3, 4, 5, 5), torch.randn(3, 4, 5, 5)
        out = block(enc, dec)
        gate_e = block.enc_gate(enc)
        gate_d = block.dec_gate(dec)
        assert torch.allclose(out, gate_e * enc + gate_d * dec, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            FusionBlock(4)(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 4, 4))

    def test_function(self):
        torch.manual_seed(0)
        out = fusion_block(torch.randn(2, 6, 4, 4), torch.randn(2, 6, 4, 4))
        assert out.shape == (2, 6, 4, 4)
        with pytest.raises(ShapeError):
            fusion_block(torch.zeros(1, 6, 4, 4), torch.zeros(1, 3, 4, 4))


class TestOutputBlock:
    def test_zero_inputs_give_bias_map(self):
        torch.manual_seed(0)
        block = OutputBlock([4] * 6)
        maps = [torch.zeros(1, 4, 16 // 2 ** min(i, 4), 16 // 2 ** min(i, 4)) for i in range(6)]
        with torch.no_grad():
            for conv in block.side:
                conv.bias.zero_()
            block.scale.weight.zero_()
            block.scale.bias.zero_()
        final = output_block(maps[:3], maps[3:], (16, 16), block=block)
        assert final.shape == (1, 1, 16, 16)
        assert torch.allclose(final, torch.full_like(final, block.fuse.bias.item()))

    def test_scale_weights_in_open_interval(self):
        torch.manual_seed(0)
        block = OutputBlock([2, 2, 4, 4, 4, 4])
        maps = [torch.randn(2, c, 8, 8) for c in (2, 2, 4, 4, 4, 4)]
        block(maps, (8, 8))
        assert ((block.last_scale > 0) & (block.last_scale < 1)).all()

    def test_side_outputs_upsampled(self):
        torch.manual_seed(0)
        block = OutputBlock([1] * 6)
        maps = [torch.randn(1, 1, s, s) for s in (32, 32, 16, 8, 4, 2)]
        final, sides = block(maps, (32, 32))
        assert final.shape == (1, 1, 32, 32)
        assert all(s.shape == (1, 1, 32, 32) for s in sides)
