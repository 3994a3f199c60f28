"""
視覺化模組 - stage-4 差分特徵圖與重建相似度圖

色階固定（不依影像自動縮放），不同執行之間的圖可以直接比較。
"""

import logging
import os
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from matplotlib import colormaps
from matplotlib.colors import Normalize
from PIL import Image

from .config import Directionality
from .consistency import cosine, reconstruct
from .data import BiTemporalSample
from .errors import ConfigError
from .model import Phase, SiameseChangeNet, TrainingOutputs

logger = logging.getLogger(__name__)

VISUALIZATIONS = ("diff_features", "recon_similarity")
DIFF_SCALE = (0.0, 1.0)
COSINE_SCALE = (-1.0, 1.0)
DEFAULT_CMAP = "viridis"

DeltaFn = Callable[[TrainingOutputs], Tuple[torch.Tensor, torch.Tensor]]


def render_heatmap(
    values: np.ndarray,
    scale: Tuple[float, float],
    cmap: str = DEFAULT_CMAP,
    upscale: int = 1,
) -> Image.Image:
    """
    以固定色階把 2 維數值轉成 RGB 影像

    Args:
        values: [h, w] 數值
        scale: (vmin, vmax)，超出的數值截斷到端點
        cmap: matplotlib colormap 名稱
        upscale: 最近鄰放大倍數

    Returns:
        Image.Image: RGB 影像
    """
    norm = Normalize(vmin=scale[0], vmax=scale[1], clip=True)
    rgba = colormaps[cmap](norm(np.asarray(values, dtype=np.float64)), bytes=True)
    image = Image.fromarray(np.ascontiguousarray(rgba[..., :3]))
    if upscale > 1:
        image = image.resize((image.width * upscale, image.height * upscale), Image.NEAREST)
    return image


def _batch(image: torch.Tensor) -> torch.Tensor:
    return image.unsqueeze(0) if image.dim() == 3 else image


@torch.no_grad()
def diff_feature_map(model: SiameseChangeNet, x1: torch.Tensor, x2: torch.Tensor) -> np.ndarray:
    """CD 解碼器 stage-4 |r4_1 - r4_2| 的通道平均，[h, w]"""
    model.eval()
    ref1, _ = model.seg_decode(model.encode(_batch(x1), Phase.T1))
    ref2, _ = model.seg_decode(model.encode(_batch(x2), Phase.T2))
    _, features = model.cd_decode(ref1, ref2, tuple(x1.shape[-2:]), return_features=True)
    return features["diff4"][0].mean(dim=0).cpu().numpy()


@torch.no_grad()
def recon_similarity_map(
    model: SiameseChangeNet,
    x1: torch.Tensor,
    x2: torch.Tensor,
    directionality: Directionality = Directionality.TWO_WAY,
    delta_fn: Optional[DeltaFn] = None,
) -> Dict[str, np.ndarray]:
    """
    每個 token 上 I_i^4 與重建 Î_i^4 的餘弦相似度

    Args:
        model: 需掛載 TTG
        x1, x2: 雙時相影像
        directionality: 決定產生哪些重建
        delta_fn: 替換 transition features 的除錯掛鉤

    Returns:
        dict: "t1" / "t2" → [h, w] 相似度圖（只包含有產生的重建）
    """
    if model.ttg is None and delta_fn is None:
        raise ConfigError("recon_similarity 需要掛載 TTG 的模型")
    model.eval()
    outputs = model.forward_train(_batch(x1), _batch(x2), run_ttg=delta_fn is None)
    if delta_fn is not None:
        outputs.delta_t1, outputs.delta_t2 = delta_fn(outputs)
    hat1, hat2 = reconstruct(
        outputs.tokens_t1, outputs.tokens_t2, outputs.delta_t1, outputs.delta_t2, directionality
    )
    grid = outputs.grid
    maps = {}
    for name, original, rebuilt in (("t1", outputs.tokens_t1, hat1), ("t2", outputs.tokens_t2, hat2)):
        if rebuilt is not None:
            maps[name] = cosine(original[0], rebuilt[0]).reshape(grid).cpu().numpy()
    return maps


def true_difference(outputs: TrainingOutputs) -> Tuple[torch.Tensor, torch.Tensor]:
    """Δ_1 = I_1 - I_2、Δ_2 = I_2 - I_1，使重建等於原始特徵"""
    return outputs.tokens_t1 - outputs.tokens_t2, outputs.tokens_t2 - outputs.tokens_t1


def save_visualization(
    model: SiameseChangeNet,
    sample: BiTemporalSample,
    what: str,
    out_dir: str,
    directionality: Directionality = Directionality.TWO_WAY,
    delta_fn: Optional[DeltaFn] = None,
    cmap: str = DEFAULT_CMAP,
) -> List[str]:
    """
    產生指定種類的圖並寫成 PNG

    Returns:
        list: 寫出的檔案路徑
    """
    if what not in VISUALIZATIONS:
        raise ConfigError(f"未知的視覺化種類: {what}（可用: {', '.join(VISUALIZATIONS)}）")
    os.makedirs(out_dir, exist_ok=True)
    x1 = torch.from_numpy(np.ascontiguousarray(sample.image_t1, dtype=np.float32))
    x2 = torch.from_numpy(np.ascontiguousarray(sample.image_t2, dtype=np.float32))
    device = next(model.parameters()).device
    x1, x2 = x1.to(device), x2.to(device)
    height = sample.size[0]

    if what == "diff_features":
        values = diff_feature_map(model, x1, x2)
        maps = {"diff4": (values, DIFF_SCALE)}
    else:
        maps = {
            f"recon_{name}": (values, COSINE_SCALE)
            for name, values in recon_similarity_map(model, x1, x2, directionality, delta_fn).items()
        }

    paths = []
    for name, (values, scale) in maps.items():
        path = os.path.join(out_dir, f"{sample.sample_id}_{name}.png")
        upscale = max(1, height // values.shape[0])
        render_heatmap(values, scale, cmap, upscale).save(path)
        paths.append(path)
    logger.info("已寫出 %d 張 %s 圖到 %s", len(paths), what, out_dir)
    return paths
