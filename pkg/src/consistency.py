"""
時空語意聯合約束模組 - 重建映射、token 標籤與所有訓練損失

所有函式皆為純函式，輸入 torch 張量、輸出純量張量。
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Set, Tuple

import torch
import torch.nn.functional as F

from .config import Directionality, LossWeights, Task
from .errors import ConfigError, DataError, ShapeError

LOSS_TERMS = ("l_change", "l_sem", "l_sa", "l_recon", "l_trans")


@dataclass
class TokenLabels:
    """
    stage-4 解析度的 token 標籤

    Attributes:
        y: [..., N]，+1 為未變化、-1 為變化
        change_fraction: 變化 token 所佔比例
    """

    y: torch.Tensor
    change_fraction: float


@dataclass
class LossReport:
    """各損失項與加權總和；未啟用的項為 0 且不在 active_terms 中"""

    l_change: torch.Tensor
    l_sem: torch.Tensor
    l_sa: torch.Tensor
    l_recon: torch.Tensor
    l_trans: torch.Tensor
    total: torch.Tensor
    active_terms: Set[str] = field(default_factory=set)

    @property
    def l_cd(self) -> torch.Tensor:
        return self.l_change + self.l_sem + self.l_sa

    def as_dict(self) -> Dict[str, float]:
        values = {name: float(getattr(self, name).detach()) for name in LOSS_TERMS}
        values["total"] = float(self.total.detach())
        return values


def cosine(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """餘弦相似度；零向量的相似度定義為 0（由 eps 下限保證）"""
    return F.cosine_similarity(a, b, dim=dim, eps=1e-12)


def reconstruct(
    i1_4: torch.Tensor,
    i2_4: torch.Tensor,
    d1: torch.Tensor,
    d2: torch.Tensor,
    directionality: Directionality = Directionality.TWO_WAY,
) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
    """
    由另一時相加上 transition feature 重建本時相

    Î_2 = I_1 + Δ_2，Î_1 = I_2 + Δ_1

    Returns:
        tuple: (Î_1 或 None, Î_2 或 None)
    """
    shapes = {tuple(t.shape) for t in (i1_4, i2_4, d1, d2)}
    if len(shapes) != 1:
        raise ShapeError(f"重建輸入形狀不一致: {sorted(shapes)}")
    hat1 = i2_4 + d1 if directionality != Directionality.ONE_WAY_EQ1 else None
    hat2 = i1_4 + d2 if directionality != Directionality.ONE_WAY_EQ2 else None
    return hat1, hat2


def downsample_change_mask(change_mask: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
    """
    以多數決把像素變化遮罩縮到 grid 解析度

    Args:
        change_mask: [H, W] 或 [B, H, W] 的 0/1 遮罩
        grid: 目標 (h, w)，H、W 必須能被整除

    Returns:
        torch.Tensor: 與輸入批次維度相同的布林張量，True 表示變化
    """
    height, width = change_mask.shape[-2:]
    h, w = grid
    if h < 1 or w < 1 or height % h != 0 or width % w != 0:
        raise ShapeError(f"遮罩尺寸 {height}x{width} 無法被網格 {h}x{w} 整除")
    mask = change_mask.reshape(-1, 1, height, width).to(torch.float64)
    fraction = F.avg_pool2d(mask, kernel_size=(height // h, width // w))
    changed = fraction > 0.5
    return changed.reshape(*change_mask.shape[:-2], h, w)


def token_labels_from_mask(change_mask: torch.Tensor, stage4_grid: Tuple[int, int]) -> TokenLabels:
    """每個 token 的 patch 中變化像素比例 > 0.5 標為 -1，否則 +1"""
    changed = downsample_change_mask(change_mask, stage4_grid).flatten(-2)
    y = torch.where(changed, -1, 1).to(torch.int64)
    fraction = float(changed.float().mean()) if changed.numel() else 0.0
    return TokenLabels(y=y, change_fraction=fraction)


def loss_change(change_logits: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """二元變化圖的逐像素交叉熵"""
    gt_mask = gt_mask.long()
    if gt_mask.numel() and (gt_mask.min() < 0 or gt_mask.max() > 1):
        raise DataError(
            f"變化遮罩標籤必須是 0/1，找到範圍 [{int(gt_mask.min())}, {int(gt_mask.max())}]"
        )
    return F.cross_entropy(change_logits, gt_mask)


def _masked_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int) -> torch.Tensor:
    num_classes = logits.shape[1]
    labels = labels.long()
    invalid = (labels != ignore_index) & ((labels < 0) | (labels >= num_classes))
    if invalid.any():
        bad = int(labels[invalid][0])
        raise DataError(f"語意標籤 {bad} 超出類別數 {num_classes}（且不是 ignore_index={ignore_index}）")
    valid = int((labels != ignore_index).sum())
    if valid == 0:
        # 空集合定義為 0，梯度也為 0
        return logits.sum() * 0.0
    total = F.cross_entropy(logits, labels, ignore_index=ignore_index, reduction="sum")
    return total / valid


def loss_sem(
    sem_logits_t1: torch.Tensor,
    sem_logits_t2: torch.Tensor,
    gt_sem_t1: torch.Tensor,
    gt_sem_t2: torch.Tensor,
    ignore_index: int = 255,
) -> torch.Tensor:
    """兩個時相各自的平均交叉熵之和"""
    return _masked_cross_entropy(sem_logits_t1, gt_sem_t1, ignore_index) + _masked_cross_entropy(
        sem_logits_t2, gt_sem_t2, ignore_index
    )


def loss_sa(feat_t1: torch.Tensor, feat_t2: torch.Tensor, gt_change_mask: torch.Tensor) -> torch.Tensor:
    """
    語意對齊損失：在未變化像素上取 1 - cos(f_1, f_2) 的平均

    Args:
        feat_t1, feat_t2: [B, C, h, w] 的 Seg 解碼器特徵
        gt_change_mask: [B, H, W] 全解析度變化遮罩，以多數決縮到 (h, w)

    Returns:
        torch.Tensor: 純量；沒有未變化像素時為 0
    """
    if feat_t1.shape != feat_t2.shape:
        raise ShapeError(f"特徵形狀不符: {tuple(feat_t1.shape)} vs {tuple(feat_t2.shape)}")
    unchanged = ~downsample_change_mask(gt_change_mask, tuple(feat_t1.shape[-2:]))
    unchanged = unchanged.to(feat_t1.dtype)
    count = unchanged.sum()
    if count == 0:
        return (feat_t1.sum() + feat_t2.sum()) * 0.0
    dissimilarity = 1.0 - cosine(feat_t1, feat_t2, dim=1)
    return (dissimilarity * unchanged).sum() / count


def loss_recon(original: torch.Tensor, reconstructed: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """
    單一時相的 InfoNCE：錨點 I^{b,l} 的正樣本為 Î^{b,l}，其餘所有重建 token 為負樣本

    Args:
        original: [B, L, D_v]
        reconstructed: [B, L, D_v]
        tau: 溫度

    Returns:
        torch.Tensor: 純量
    """
    if tau <= 0:
        raise ConfigError(f"tau 必須 > 0，目前為 {tau}")
    if original.shape != reconstructed.shape:
        raise ShapeError(
            f"原始與重建特徵形狀不符: {tuple(original.shape)} vs {tuple(reconstructed.shape)}"
        )
    anchors = F.normalize(original.reshape(-1, original.shape[-1]), dim=-1)
    candidates = F.normalize(reconstructed.reshape(-1, reconstructed.shape[-1]), dim=-1)
    if anchors.shape[0] == 0:
        raise ShapeError("InfoNCE 需要至少一個 token")
    logits = anchors @ candidates.T / tau
    targets = torch.arange(anchors.shape[0], device=anchors.device)
    return F.cross_entropy(logits, targets)


def loss_recon_bitemporal(
    i1_4: torch.Tensor,
    i2_4: torch.Tensor,
    hat1: Optional[torch.Tensor],
    hat2: Optional[torch.Tensor],
    tau: float = 0.07,
) -> Optional[torch.Tensor]:
    """對有產生的重建結果加總 InfoNCE；兩者皆無時回傳 None"""
    terms = []
    if hat1 is not None:
        terms.append(loss_recon(i1_4, hat1, tau))
    if hat2 is not None:
        terms.append(loss_recon(i2_4, hat2, tau))
    if not terms:
        return None
    return sum(terms[1:], terms[0])


def loss_trans(d1: torch.Tensor, d2: torch.Tensor, labels: TokenLabels) -> torch.Tensor:
    """
    transition 約束：未變化 token 取 1 - cos，變化 token 取 max(0, cos)，再對 token 平均
    """
    if d1.shape != d2.shape:
        raise ShapeError(f"Δ 形狀不符: {tuple(d1.shape)} vs {tuple(d2.shape)}")
    y = labels.y.to(d1.device)
    if tuple(y.shape) != tuple(d1.shape[:-1]):
        raise ShapeError(f"標籤形狀 {tuple(y.shape)} 與 token 形狀 {tuple(d1.shape[:-1])} 不符")
    cos = cosine(d1, d2, dim=-1)
    per_token = torch.where(y > 0, 1.0 - cos, F.relu(cos))
    return per_token.mean()


def loss_total(
    parts: Dict[str, Optional[torch.Tensor]],
    weights: LossWeights,
    task: Task,
) -> LossReport:
    """
    L_total = L_cd + λ1 L_recon + λ2 L_trans，L_cd 在 SCD 為 L_change + L_sem + L_sa

    Args:
        parts: 以 change / sem / sa / recon / trans 為鍵的損失，缺少或 None 視為未啟用
        weights: 權重與開關
        task: BCD 或 SCD

    Returns:
        LossReport: 逐項列出的損失報告
    """
    reference = next((value for value in parts.values() if value is not None), None)
    if reference is None:
        raise ValueError("至少需要一個損失項")
    zero = torch.zeros((), dtype=reference.dtype, device=reference.device)

    enabled = {
        "change": True,
        "sem": task == Task.SCD,
        "sa": task == Task.SCD,
        "recon": weights.enable_recon,
        "trans": weights.enable_trans,
    }
    terms, active = {}, set()
    for name, is_enabled in enabled.items():
        value = parts.get(name)
        if is_enabled and value is not None:
            terms[name] = value
            active.add(f"l_{name}")
        else:
            terms[name] = zero

    total = terms["change"] + terms["sem"] + terms["sa"]
    if "l_recon" in active:
        total = total + weights.lambda1 * terms["recon"]
    if "l_trans" in active:
        total = total + weights.lambda2 * terms["trans"]
    return LossReport(
        l_change=terms["change"],
        l_sem=terms["sem"],
        l_sa=terms["sa"],
        l_recon=terms["recon"],
        l_trans=terms["trans"],
        total=total,
        active_terms=active,
    )
