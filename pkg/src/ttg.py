"""
Text-guided Transition Generator - 由類別文字嵌入與 stage-4 visual tokens 產生 Δ_i
"""

import math
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import einsum

from .config import TTGConfig
from .embedding_provider import ClassEmbeddingSet
from .errors import ConfigError, DataError, ShapeError


class Expert(nn.Sequential):
    """E_m: Linear(D_t→D) + GELU + Linear(D→D)"""

    def __init__(self, text_dim: int, fusion_dim: int):
        super().__init__(
            nn.Linear(text_dim, fusion_dim),
            nn.GELU(),
            nn.Linear(fusion_dim, fusion_dim),
        )


class AdaptiveSemanticIntegration(nn.Module):
    """
    Soft mixture-of-experts：α = Softmax(LN(T_class) W_α)，Z = Σ_m α_m ⊙ E_m(T_class)
    """

    def __init__(self, text_dim: int, fusion_dim: int, num_experts: int):
        super().__init__()
        if num_experts < 1:
            raise ConfigError(f"num_experts 必須 >= 1，目前為 {num_experts}")
        self.norm = nn.LayerNorm(text_dim)
        self.gate = nn.Linear(text_dim, num_experts, bias=False)
        self.experts = nn.ModuleList(Expert(text_dim, fusion_dim) for _ in range(num_experts))

    def expert_weights(self, t_class: torch.Tensor) -> torch.Tensor:
        """[..., K, M]，每列和為 1"""
        return F.softmax(self.gate(self.norm(t_class)), dim=-1)

    def expert_outputs(self, t_class: torch.Tensor) -> torch.Tensor:
        """[..., K, M, D]"""
        return torch.stack([expert(t_class) for expert in self.experts], dim=-2)

    def forward(self, t_class: torch.Tensor) -> torch.Tensor:
        alpha = self.expert_weights(t_class)
        outputs = self.expert_outputs(t_class)
        return einsum(alpha, outputs, "... k m, ... k m d -> ... k d")


class BypassProjection(nn.Module):
    """關閉 ASI 時使用的單一線性投影 D_t → D"""

    def __init__(self, text_dim: int, fusion_dim: int):
        super().__init__()
        self.proj = nn.Linear(text_dim, fusion_dim)

    def forward(self, t_class: torch.Tensor) -> torch.Tensor:
        return self.proj(t_class)


class CrossModalFusionLayer(nn.Module):
    """
    一層融合：visual tokens 的自注意力加上以 Z 為 key/value 的交叉注意力
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)

    def forward(self, v: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        q = self.norm(v)
        self_out, _ = self.self_attn(q, q, q, need_weights=False)
        cross_out, _ = self.cross_attn(q, z, z, need_weights=False)
        return v + self_out + cross_out


def _square_grid(num_tokens: int) -> Tuple[int, int]:
    side = math.isqrt(num_tokens)
    if side * side == num_tokens:
        return side, side
    return 1, num_tokens


class CrossModalFusion(nn.Module):
    """
    P_v 投影 + 可學習位置嵌入 + L 層融合 + 投影回 D_v
    """

    def __init__(self, visual_dim: int, fusion_dim: int, num_layers: int, heads: int, pos_grid: int = 8):
        super().__init__()
        self.visual_proj = nn.Linear(visual_dim, fusion_dim)
        # 以零初始化，依實際 token 網格雙線性內插
        self.pos_embed = nn.Parameter(torch.zeros(1, fusion_dim, pos_grid, pos_grid))
        self.layers = nn.ModuleList(CrossModalFusionLayer(fusion_dim, heads) for _ in range(num_layers))
        self.output_proj = nn.Linear(fusion_dim, visual_dim)

    def positional(self, grid: Tuple[int, int]) -> torch.Tensor:
        pos = F.interpolate(self.pos_embed, size=tuple(grid), mode="bilinear", align_corners=False)
        return pos.flatten(2).transpose(1, 2)

    def forward(
        self,
        visual_tokens: torch.Tensor,
        z: torch.Tensor,
        grid: Optional[Tuple[int, int]] = None,
    ) -> torch.Tensor:
        """
        Args:
            visual_tokens: [B, N, D_v] 或 [N, D_v]
            z: [K, D] 或 [B, K, D] 的語意嵌入
            grid: token 網格 (h, w)；None 時視 N 為正方形網格

        Returns:
            torch.Tensor: 與 visual_tokens 同形狀的 Δ
        """
        squeeze = visual_tokens.dim() == 2
        if squeeze:
            visual_tokens = visual_tokens.unsqueeze(0)
        batch, num_tokens, _ = visual_tokens.shape
        if num_tokens == 0:
            raise DataError("visual tokens 數量為 0")
        grid = tuple(grid) if grid is not None else _square_grid(num_tokens)
        if grid[0] * grid[1] != num_tokens:
            raise ShapeError(f"token 網格 {grid} 與 token 數 {num_tokens} 不符")

        v = self.visual_proj(visual_tokens) + self.positional(grid)
        if z.dim() == 2:
            z = z.unsqueeze(0).expand(batch, -1, -1)
        for layer in self.layers:
            v = layer(v, z)
        delta = self.output_proj(v)
        return delta.squeeze(0) if squeeze else delta


class TextGuidedTransitionGenerator(nn.Module):
    """
    TTG：T_class 經 ASI（或 bypass 投影）得到 Z，再與 I_i^4 融合得到 Δ_i

    T_class 在建構時快取為 buffer；Z 依賴可訓練參數，每次前向計算一次並
    廣播到整個 batch。
    """

    def __init__(self, config: TTGConfig, visual_dim: int, class_embeddings: ClassEmbeddingSet):
        super().__init__()
        config.validate()
        if class_embeddings.dim != config.text_dim:
            raise DataError(
                f"文字嵌入維度 {class_embeddings.dim} 與 text_dim={config.text_dim} 不符"
            )
        self.config = config
        self.visual_dim = visual_dim
        self.class_names = list(class_embeddings.class_names)
        self.register_buffer("t_class", torch.from_numpy(class_embeddings.embeddings.copy()))
        if config.asi_enabled:
            self.text_adapter: nn.Module = AdaptiveSemanticIntegration(
                config.text_dim, config.fusion_dim, config.num_experts
            )
        else:
            self.text_adapter = BypassProjection(config.text_dim, config.fusion_dim)
        self.fusion = CrossModalFusion(
            visual_dim,
            config.fusion_dim,
            config.decoder_layers,
            config.attention_heads,
            config.pos_grid,
        )

    def semantic_embedding(self) -> torch.Tensor:
        """Z: [K, D]"""
        return self.text_adapter(self.t_class)

    def forward(self, visual_tokens: torch.Tensor, grid: Optional[Tuple[int, int]] = None) -> torch.Tensor:
        return self.fusion(visual_tokens, self.semantic_embedding(), grid)

    def generate(
        self,
        tokens_t1: torch.Tensor,
        tokens_t2: torch.Tensor,
        grid: Optional[Tuple[int, int]] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Δ_i 由第 i 個時相的 tokens 產生；Z 只計算一次"""
        z = self.semantic_embedding()
        return self.fusion(tokens_t1, z, grid), self.fusion(tokens_t2, z, grid)
