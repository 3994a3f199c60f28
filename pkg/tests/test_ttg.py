"""
測試模組 - Text-guided Transition Generator
"""

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck
from torch.func import functional_call

from src.config import TTGConfig
from src.embedding_provider import ClassEmbeddingSet, EmbeddingSource
from src.errors import ConfigError, DataError, ShapeError
from src.ttg import AdaptiveSemanticIntegration, BypassProjection, TextGuidedTransitionGenerator

NAMES = ["ground", "tree", "water", "building"]


def _embeddings(dim=32):
    rng = np.random.default_rng(0)
    return ClassEmbeddingSet(rng.standard_normal((len(NAMES), dim)), EmbeddingSource.SEEDED_SYNTHETIC, NAMES)


def _ttg(**kwargs):
    config = TTGConfig(
        num_experts=3, fusion_dim=16, decoder_layers=2, attention_heads=2, text_dim=32, embedding_file=None
    )
    for key, value in kwargs.items():
        setattr(config, key, value)
    torch.manual_seed(0)
    return TextGuidedTransitionGenerator(config, visual_dim=24, class_embeddings=_embeddings())


def _param_count(module):
    return sum(p.numel() for p in module.parameters())


class TestAdaptiveSemanticIntegration:
    """
    soft mixture-of-experts
    """

    def test_expert_weights_sum_to_one(self):
        """每個類別的 α 總和為 1"""
        asi = AdaptiveSemanticIntegration(text_dim=32, fusion_dim=16, num_experts=5)
        alpha = asi.expert_weights(torch.randn(4, 32))
        assert alpha.shape == (4, 5)
        torch.testing.assert_close(alpha.sum(dim=-1), torch.ones(4))
        assert bool((alpha >= 0).all())

    def test_output_is_weighted_sum(self):
        asi = AdaptiveSemanticIntegration(text_dim=32, fusion_dim=16, num_experts=3)
        t_class = torch.randn(4, 32)
        with torch.no_grad():
            expected = (asi.expert_weights(t_class).unsqueeze(-1) * asi.expert_outputs(t_class)).sum(dim=-2)
            torch.testing.assert_close(asi(t_class), expected)

    def test_single_expert_equals_that_expert(self):
        """M=1 時 α 恆為 1"""
        asi = AdaptiveSemanticIntegration(text_dim=32, fusion_dim=16, num_experts=1)
        t_class = torch.randn(4, 32)
        with torch.no_grad():
            torch.testing.assert_close(asi(t_class), asi.experts[0](t_class))

    def test_zero_experts(self):
        with pytest.raises(ConfigError, match="num_experts"):
            AdaptiveSemanticIntegration(text_dim=32, fusion_dim=16, num_experts=0)


class TestTransitionGenerator:
    """
    Δ 的產生
    """

    def test_delta_shape_matches_tokens(self):
        ttg = _ttg()
        tokens = torch.randn(2, 16, 24)
        assert ttg(tokens, (4, 4)).shape == (2, 16, 24)

    def test_unbatched_tokens(self):
        ttg = _ttg()
        assert ttg(torch.randn(9, 24)).shape == (9, 24)

    def test_semantic_embedding_computed_once(self, mocker):
        """generate 對兩個時相只計算一次 Z"""
        ttg = _ttg()
        spy = mocker.spy(ttg.text_adapter, "forward")
        d1, d2 = ttg.generate(torch.randn(2, 4, 24), torch.randn(2, 4, 24), (2, 2))
        assert spy.call_count == 1
        assert d1.shape == d2.shape == (2, 4, 24)

    def test_bypass_when_asi_disabled(self):
        ttg = _ttg(asi_enabled=False)
        assert isinstance(ttg.text_adapter, BypassProjection)
        assert ttg.semantic_embedding().shape == (4, 16)

    def test_class_embeddings_are_buffer(self):
        """T_class 不是可訓練參數"""
        ttg = _ttg()
        names = {name for name, _ in ttg.named_parameters()}
        assert "t_class" not in names
        assert "t_class" in dict(ttg.named_buffers())

    def test_text_dim_mismatch(self):
        config = TTGConfig(num_experts=2, fusion_dim=16, attention_heads=2, text_dim=64, embedding_file=None)
        with pytest.raises(DataError, match="text_dim"):
            TextGuidedTransitionGenerator(config, visual_dim=24, class_embeddings=_embeddings(32))

    def test_grid_mismatch(self):
        with pytest.raises(ShapeError, match="網格"):
            _ttg()(torch.randn(1, 6, 24), (2, 2))

    def test_empty_tokens(self):
        with pytest.raises(DataError):
            _ttg()(torch.randn(1, 0, 24), (0, 0))


class TestSemanticEmbeddingProperties:
    """
    Z 與 bypass 投影的性質
    """

    def test_z_inside_expert_range(self):
        """Z 的每個通道都落在各 expert 輸出的最小值與最大值之間"""
        asi = AdaptiveSemanticIntegration(text_dim=32, fusion_dim=16, num_experts=4)
        t_class = torch.randn(6, 32, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            z = asi(t_class)
            outputs = asi.expert_outputs(t_class)
        assert bool((z >= outputs.min(dim=-2).values - 1e-6).all())
        assert bool((z <= outputs.max(dim=-2).values + 1e-6).all())

    def test_identical_experts(self):
        """所有 expert 相同時 Z 與 α 無關"""
        asi = AdaptiveSemanticIntegration(text_dim=32, fusion_dim=16, num_experts=3)
        for expert in asi.experts[1:]:
            expert.load_state_dict(asi.experts[0].state_dict())
        t_class = torch.randn(4, 32)
        with torch.no_grad():
            torch.testing.assert_close(asi(t_class), asi.experts[0](t_class))

    def test_identity_bypass_returns_embeddings(self):
        """D_t = D 且投影為單位矩陣時 Z == T_class"""
        bypass = BypassProjection(text_dim=16, fusion_dim=16)
        with torch.no_grad():
            bypass.proj.weight.copy_(torch.eye(16))
            bypass.proj.bias.zero_()
            t_class = torch.randn(4, 16)
            torch.testing.assert_close(bypass(t_class), t_class)

    def test_asi_toggle_keeps_shapes(self):
        """切換 ASI 只改變參數量，不改變 Δ 形狀"""
        with_asi, without_asi = _ttg(), _ttg(asi_enabled=False)
        tokens = torch.randn(2, 16, 24)
        assert with_asi(tokens, (4, 4)).shape == without_asi(tokens, (4, 4)).shape
        assert _param_count(without_asi) < _param_count(with_asi)


class TestFusionProperties:
    """
    跨模態融合的性質
    """

    @pytest.mark.parametrize("side", [2, 4, 8])
    def test_output_shape(self, side):
        ttg = _ttg()
        tokens = torch.randn(side * side, 24)
        assert ttg(tokens).shape == (side * side, 24)

    def test_zero_layers_is_projection(self):
        """L = 0 時只剩兩個線性投影（位置嵌入初始為 0）"""
        ttg = _ttg(decoder_layers=0)
        tokens = torch.randn(1, 16, 24)
        with torch.no_grad():
            expected = ttg.fusion.output_proj(ttg.fusion.visual_proj(tokens))
            torch.testing.assert_close(ttg(tokens, (4, 4)), expected)

    def test_class_order_invariance(self):
        """打亂 Z 的類別列順序，Δ 不變"""
        ttg = _ttg().double().eval()
        tokens = torch.randn(1, 16, 24, dtype=torch.float64)
        with torch.no_grad():
            z = ttg.semantic_embedding()
            permuted = z[torch.tensor([2, 0, 3, 1])]
            torch.testing.assert_close(ttg.fusion(tokens, permuted, (4, 4)), ttg.fusion(tokens, z, (4, 4)))


class TestTransitionGradients:
    """
    float64 下 Δ 對輸入與 expert 權重的有限差分檢查
    """

    def test_gradient_wrt_visual_tokens(self):
        ttg = _ttg(decoder_layers=1).double()
        tokens = torch.randn(1, 4, 24, dtype=torch.float64, requires_grad=True)
        assert gradcheck(lambda x: ttg(x, (2, 2)), (tokens,), eps=1e-6, atol=1e-5, rtol=1e-3)

    def test_gradient_wrt_expert_weights(self):
        ttg = _ttg(decoder_layers=1).double()
        tokens = torch.randn(1, 4, 24, dtype=torch.float64)
        name = "text_adapter.experts.0.2.weight"
        weight = dict(ttg.named_parameters())[name].detach().clone().requires_grad_(True)

        def delta(w):
            return functional_call(ttg, {name: w}, (tokens, (2, 2)))

        assert gradcheck(delta, (weight,), eps=1e-6, atol=1e-5, rtol=1e-3)
