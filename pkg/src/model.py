"""
模型核心模組 - 權重共享的階層式編碼器、兩個時相共用的 Seg 解碼器與中央 CD 解碼器

推論路徑只經過 encoder → seg decoder → cd decoder；TTG 掛在模型上但
只在訓練時使用。
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig, RunConfig, Task
from .embedding_provider import ClassEmbeddingSet, text_provider_load
from .errors import ConfigError, ShapeError
from .ttg import TextGuidedTransitionGenerator

logger = logging.getLogger(__name__)

PARAM_SCOPES = ("full", "inference", "ttg")


class Phase(Enum):
    T1 = "T1"
    T2 = "T2"


@dataclass
class FeaturePyramid:
    """單一時相的四層特徵，stage s 形狀為 [B, C_s, H/stride_s, W/stride_s]"""

    stages: List[torch.Tensor]
    phase: Phase

    @property
    def stage4_grid(self) -> Tuple[int, int]:
        return tuple(self.stages[3].shape[-2:])

    def stage4_tokens(self) -> torch.Tensor:
        """[B, N, D_v] 的 stage-4 visual tokens"""
        return self.stages[3].flatten(2).transpose(1, 2)


@dataclass
class RefinedFeatures:
    r1: torch.Tensor
    r2: torch.Tensor
    r4: torch.Tensor


@dataclass
class PredictionSet:
    change_logits: torch.Tensor
    sem_logits_t1: Optional[torch.Tensor] = None
    sem_logits_t2: Optional[torch.Tensor] = None


@dataclass
class TrainingOutputs:
    """訓練前向傳播的所有中間結果"""

    predictions: PredictionSet
    refined_t1: RefinedFeatures
    refined_t2: RefinedFeatures
    tokens_t1: torch.Tensor
    tokens_t2: torch.Tensor
    grid: Tuple[int, int]
    delta_t1: Optional[torch.Tensor] = None
    delta_t2: Optional[torch.Tensor] = None


def upsample(x: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def _norm(channels: int) -> nn.GroupNorm:
    # 與 batch 無關的正規化
    return nn.GroupNorm(math.gcd(8, channels), channels)


class ConvBlock(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            _norm(out_channels),
            nn.GELU(),
        )


class PredictionHead(nn.Sequential):
    """3x3 conv + norm + GELU + 1x1 conv"""

    def __init__(self, in_channels: int, num_outputs: int):
        super().__init__(ConvBlock(in_channels, in_channels), nn.Conv2d(in_channels, num_outputs, 1))


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        kernel = 2 * stride - 1
        self.proj = nn.Conv2d(in_channels, out_channels, kernel, stride, kernel // 2)
        self.norm = nn.LayerNorm(out_channels)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, Tuple[int, int]]:
        x = self.proj(x)
        size = tuple(x.shape[-2:])
        return self.norm(x.flatten(2).transpose(1, 2)), size


class EfficientSelfAttention(nn.Module):
    """以空間縮減（sr_ratio）降低 key/value 數量的自注意力"""

    def __init__(self, dim: int, heads: int, sr_ratio: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        kv = x
        if self.sr_ratio > 1:
            batch, _, channels = x.shape
            grid = x.transpose(1, 2).reshape(batch, channels, *size)
            kv = self.sr_norm(self.sr(grid).flatten(2).transpose(1, 2))
        out, _ = self.attn(x, kv, kv, need_weights=False)
        return out


class MixFFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        x = self.fc1(x)
        batch, _, channels = x.shape
        x = self.dwconv(x.transpose(1, 2).reshape(batch, channels, *size))
        return self.fc2(self.act(x.flatten(2).transpose(1, 2)))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, sr_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFFN(dim, dim * 4)

    def forward(self, x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), size)
        return x + self.ffn(self.norm2(x), size)


class EncoderStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, depth: int, heads: int, sr_ratio: int):
        super().__init__()
        self.patch_embed = OverlapPatchEmbed(in_channels, out_channels, stride)
        self.blocks = nn.ModuleList(
            TransformerBlock(out_channels, heads, sr_ratio) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens, size = self.patch_embed(x)
        for block in self.blocks:
            tokens = block(tokens, size)
        tokens = self.norm(tokens)
        return tokens.transpose(1, 2).reshape(x.shape[0], -1, *size)


class HierarchicalEncoder(nn.Module):
    """
    四層的 conv patch-embed + 輕量自注意力編碼器，步距固定為 4/8/16/32
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        in_channels = [config.in_channels] + list(config.stage_channels[:-1])
        # 第一層步距 4，其後每層再縮小 2 倍
        relative_strides = [config.stage_strides[0]] + [
            b // a for a, b in zip(config.stage_strides, config.stage_strides[1:])
        ]
        self.stages = nn.ModuleList(
            EncoderStage(
                in_ch,
                out_ch,
                stride,
                config.blocks_per_stage,
                config.attention_heads,
                sr_ratio,
            )
            for in_ch, out_ch, stride, sr_ratio in zip(
                in_channels, config.stage_channels, relative_strides, config.sr_ratios
            )
        )

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class SegDecoder(nn.Module):
    """
    由上而下的精煉解碼器

    stage-4 上採樣後與 stage-3 串接並以 1x1 conv 統一通道，接著逐步上採樣
    並與 stage-2、stage-1 融合，得到 r1 / r2 / r4；SCD 模式下由 r1 產生語意 logits。
    """

    def __init__(self, config: ModelConfig, num_classes: Optional[int]):
        super().__init__()
        c1, c2, c3, c4 = config.stage_channels
        width = config.decoder_dim
        self.fuse34 = nn.Sequential(nn.Conv2d(c3 + c4, width, 1), _norm(width), nn.GELU())
        self.refine4 = nn.Conv2d(width, c4, 1)
        self.fuse2 = nn.Sequential(nn.Conv2d(width + c2, width, 1), ConvBlock(width, width))
        self.fuse1 = nn.Sequential(nn.Conv2d(width + c1, width, 1), ConvBlock(width, width))
        self.head = PredictionHead(width, num_classes) if num_classes else None

    def forward(self, stages: List[torch.Tensor]) -> Tuple[RefinedFeatures, Optional[torch.Tensor]]:
        s1, s2, s3, s4 = stages
        f34 = self.fuse34(torch.cat([upsample(s4, s3.shape[-2:]), s3], dim=1))
        # 把融合後的高層語意帶回 stage-4 解析度，形狀與編碼器 stage-4 相同
        r4 = s4 + self.refine4(F.avg_pool2d(f34, 2))
        r2 = self.fuse2(torch.cat([upsample(f34, s2.shape[-2:]), s2], dim=1))
        r1 = self.fuse1(torch.cat([upsample(r2, s1.shape[-2:]), s1], dim=1))

        sem_logits = None
        if self.head is not None:
            full_size = (s1.shape[-2] * 4, s1.shape[-1] * 4)
            sem_logits = upsample(self.head(r1), full_size)
        return RefinedFeatures(r1=r1, r2=r2, r4=r4), sem_logits


class CDDecoder(nn.Module):
    """
    中央變化偵測解碼器

    deep = conv(concat(r4_1, r4_2, |r4_1 - r4_2|))，再逐步上採樣並融合
    |r2_1 - r2_2| 與 |r1_1 - r1_2|，最後輸出 2 通道 logits。
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        c4 = config.stage_channels[3]
        width = config.decoder_dim
        self.deep = nn.Sequential(nn.Conv2d(3 * c4, width, 1), ConvBlock(width, width))
        self.fuse2 = nn.Sequential(nn.Conv2d(2 * width, width, 1), ConvBlock(width, width))
        self.fuse1 = nn.Sequential(nn.Conv2d(2 * width, width, 1), ConvBlock(width, width))
        self.head = PredictionHead(width, 2)

    def forward(
        self,
        ref1: RefinedFeatures,
        ref2: RefinedFeatures,
        out_size: Optional[Tuple[int, int]] = None,
        return_features: bool = False,
    ):
        for name in ("r1", "r2", "r4"):
            a, b = getattr(ref1, name), getattr(ref2, name)
            if a.shape != b.shape:
                raise ShapeError(f"{name} 形狀不符: {tuple(a.shape)} vs {tuple(b.shape)}")

        diff4 = (ref1.r4 - ref2.r4).abs()
        diff2 = (ref1.r2 - ref2.r2).abs()
        diff1 = (ref1.r1 - ref2.r1).abs()

        x = self.deep(torch.cat([ref1.r4, ref2.r4, diff4], dim=1))
        x = self.fuse2(torch.cat([upsample(x, diff2.shape[-2:]), diff2], dim=1))
        x = self.fuse1(torch.cat([upsample(x, diff1.shape[-2:]), diff1], dim=1))

        if out_size is None:
            out_size = (diff1.shape[-2] * 4, diff1.shape[-1] * 4)
        logits = upsample(self.head(x), out_size)
        if return_features:
            return logits, {"diff4": diff4, "diff2": diff2, "diff1": diff1}
        return logits


class SiameseChangeNet(nn.Module):
    """
    孿生三分支變化偵測模型；TTG 以 attach_ttg 掛上，只在訓練時使用
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        num_classes = config.num_classes if config.task == Task.SCD else None
        self.encoder = HierarchicalEncoder(config)
        # 兩個時相共用權重：x1 == x2 時所有差分輸入恰為 0
        self.seg_decoder = SegDecoder(config, num_classes)
        self.cd_decoder = CDDecoder(config)
        self.ttg: Optional[TextGuidedTransitionGenerator] = None

    def attach_ttg(self, ttg: Optional[TextGuidedTransitionGenerator]) -> None:
        if ttg is not None and ttg.visual_dim != self.config.stage_channels[3]:
            raise ConfigError(
                f"TTG visual_dim={ttg.visual_dim} 與 stage-4 通道數 "
                f"{self.config.stage_channels[3]} 不符"
            )
        self.ttg = ttg

    def inference_modules(self) -> List[nn.Module]:
        return [self.encoder, self.seg_decoder, self.cd_decoder]

    def encode(self, image: torch.Tensor, phase: Phase = Phase.T1) -> FeaturePyramid:
        """
        以共享權重編碼單一時相影像

        Args:
            image: [B, C, H, W] 或 [C, H, W]，H、W 必須能被 32 整除
            phase: 只作為標記，兩個時相使用相同權重

        Returns:
            FeaturePyramid: 四層特徵
        """
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.dim() != 4:
            raise ShapeError(f"影像必須是 [B, C, H, W]，目前形狀為 {tuple(image.shape)}")
        if image.shape[1] != self.config.in_channels:
            raise ConfigError(
                f"輸入通道數 {image.shape[1]} 與 in_channels={self.config.in_channels} 不符"
            )
        for axis, size in (("H", image.shape[-2]), ("W", image.shape[-1])):
            if size % 32 != 0:
                raise ConfigError(f"輸入 {axis}={size} 無法被 32 整除")
        return FeaturePyramid(stages=self.encoder(image), phase=phase)

    def seg_decode(self, pyramid: FeaturePyramid) -> Tuple[RefinedFeatures, Optional[torch.Tensor]]:
        return self.seg_decoder(pyramid.stages)

    def cd_decode(self, ref1: RefinedFeatures, ref2: RefinedFeatures, out_size=None, return_features=False):
        return self.cd_decoder(ref1, ref2, out_size, return_features)

    def _decode_pair(self, x1: torch.Tensor, x2: torch.Tensor):
        pyr1 = self.encode(x1, Phase.T1)
        pyr2 = self.encode(x2, Phase.T2)
        ref1, sem1 = self.seg_decode(pyr1)
        ref2, sem2 = self.seg_decode(pyr2)
        out_size = tuple(x1.shape[-2:])
        change_logits = self.cd_decode(ref1, ref2, out_size)
        predictions = PredictionSet(change_logits, sem1, sem2)
        return pyr1, pyr2, ref1, ref2, predictions

    def forward_inference(self, x1: torch.Tensor, x2: torch.Tensor) -> PredictionSet:
        """兩次 encode、兩次 seg_decode、一次 cd_decode；不讀取任何 TTG 參數"""
        if x1.shape != x2.shape:
            raise ShapeError(f"兩時相影像形狀不符: {tuple(x1.shape)} vs {tuple(x2.shape)}")
        return self._decode_pair(x1, x2)[-1]

    def forward(self, x1: torch.Tensor, x2: torch.Tensor) -> PredictionSet:
        return self.forward_inference(x1, x2)

    def forward_train(self, x1: torch.Tensor, x2: torch.Tensor, run_ttg: bool = True) -> TrainingOutputs:
        """
        訓練用前向傳播：推論路徑加上 TTG 產生的 Δ_1、Δ_2

        Args:
            x1, x2: 雙時相影像
            run_ttg: 是否執行 TTG（兩個輔助損失都關閉時可跳過）

        Returns:
            TrainingOutputs: 預測與 stage-4 tokens、transition features
        """
        if x1.shape != x2.shape:
            raise ShapeError(f"兩時相影像形狀不符: {tuple(x1.shape)} vs {tuple(x2.shape)}")
        pyr1, pyr2, ref1, ref2, predictions = self._decode_pair(x1, x2)
        outputs = TrainingOutputs(
            predictions=predictions,
            refined_t1=ref1,
            refined_t2=ref2,
            tokens_t1=pyr1.stage4_tokens(),
            tokens_t2=pyr2.stage4_tokens(),
            grid=pyr1.stage4_grid,
        )
        if run_ttg:
            if self.ttg is None:
                raise ConfigError("模型沒有掛載 TTG，無法計算 transition features")
            outputs.delta_t1, outputs.delta_t2 = self.ttg.generate(
                outputs.tokens_t1, outputs.tokens_t2, outputs.grid
            )
        return outputs

    def param_count(self, scope: str = "full") -> int:
        """
        計算可訓練純量數量

        Args:
            scope: full / inference / ttg

        Returns:
            int: 參數數量
        """
        if scope == "full":
            modules: List[nn.Module] = [self]
        elif scope == "inference":
            modules = self.inference_modules()
        elif scope == "ttg":
            modules = [self.ttg] if self.ttg is not None else []
        else:
            raise ConfigError(f"未知的參數範圍: {scope}（可用: {', '.join(PARAM_SCOPES)}）")
        return sum(p.numel() for m in modules for p in m.parameters() if p.requires_grad)


def build_model(
    config: RunConfig,
    class_embeddings: Optional[ClassEmbeddingSet] = None,
    with_ttg: bool = True,
) -> SiameseChangeNet:
    """
    依設定建立模型

    推論模組先初始化、TTG 最後初始化，因此同一個 seed 下不論是否掛載
    TTG，推論路徑的初始權重都相同。
    """
    model = SiameseChangeNet(config.model)
    if with_ttg:
        if class_embeddings is None:
            class_embeddings = text_provider_load(
                config.ttg.embedding_file,
                config.data.class_names,
                config.ttg.embedding_seed,
                config.ttg.text_dim,
                config.ttg.prompt_template,
            )
        model.attach_ttg(
            TextGuidedTransitionGenerator(config.ttg, config.model.stage_channels[3], class_embeddings)
        )
    logger.info(
        "模型參數: full=%d inference=%d ttg=%d",
        model.param_count("full"),
        model.param_count("inference"),
        model.param_count("ttg"),
    )
    return model
