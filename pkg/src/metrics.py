"""
評估指標模組 - 混淆矩陣累積、BCD 指標（F1 / IoU / OA）與 SCD 指標（mIoU / SeK / F_scd）

混淆矩陣的列為真值、欄為預測。SCD 佈局為 (K+1)x(K+1)：索引 0 表示未變化，
索引 k 表示變化像素上的第 k-1 個語意類別。
"""

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError

SMALL_CHANGE_THRESHOLD = 0.05
LARGE_CHANGE_THRESHOLD = 0.25
STRATA = ("small", "large", "all")


@dataclass
class ConfusionMatrix:
    """可合併的混淆矩陣值物件"""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred_mask, gt_mask, ignore_index: Optional[int] = None) -> "ConfusionMatrix":
        """
        累積一批預測，回傳新的混淆矩陣

        Args:
            pred_mask: 預測標籤
            gt_mask: 真值標籤（形狀需與預測相同）
            ignore_index: 真值為此值的像素略過

        Returns:
            ConfusionMatrix: 新的矩陣
        """
        pred = np.asarray(pred_mask).astype(np.int64).ravel()
        gt = np.asarray(gt_mask).astype(np.int64).ravel()
        if np.shape(pred_mask) != np.shape(gt_mask):
            raise DataError(f"預測與真值形狀不符: {np.shape(pred_mask)} vs {np.shape(gt_mask)}")
        if ignore_index is not None:
            keep = gt != ignore_index
            pred, gt = pred[keep], gt[keep]
        n = self.num_classes
        for name, values in (("真值", gt), ("預測", pred)):
            if values.size and (values.min() < 0 or values.max() >= n):
                raise DataError(
                    f"{name}標籤超出範圍 [0, {n - 1}]: 找到 [{values.min()}, {values.max()}]"
                )
        count = np.bincount(n * gt + pred, minlength=n * n).reshape(n, n)
        return ConfusionMatrix(self.counts + count)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise DataError(f"無法合併不同大小的混淆矩陣: {self.counts.shape} vs {other.counts.shape}")
        return ConfusionMatrix(self.counts + other.counts)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return self.merge(other)


@dataclass
class MetricReport:
    """百分比指標與退化情況旗標"""

    values: Dict[str, float]
    flags: List[str] = field(default_factory=list)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def to_dict(self) -> Dict:
        return {"values": dict(self.values), "flags": list(self.flags)}


def _ratio(numerator: float, denominator: float, name: str, flags: List[str]) -> float:
    if denominator == 0:
        flags.append(name)
        return 0.0
    return numerator / denominator


def bcd_metrics(cm: ConfusionMatrix) -> MetricReport:
    """
    變化類別（索引 1）的 F1、IoU 與整體 OA

    Args:
        cm: 2x2 混淆矩陣

    Returns:
        MetricReport: F1 / IoU / OA / Precision / Recall（百分比）
    """
    if cm.num_classes != 2:
        raise DataError(f"BCD 指標需要 2x2 混淆矩陣，收到 {cm.counts.shape}")
    tn, fp = (float(v) for v in cm.counts[0])
    fn, tp = (float(v) for v in cm.counts[1])
    flags: List[str] = []
    values = {
        "F1": 100.0 * _ratio(2 * tp, 2 * tp + fp + fn, "F1", flags),
        "IoU": 100.0 * _ratio(tp, tp + fp + fn, "IoU", flags),
        "OA": 100.0 * _ratio(tp + tn, tp + tn + fp + fn, "OA", flags),
        "Precision": 100.0 * _ratio(tp, tp + fp, "Precision", flags),
        "Recall": 100.0 * _ratio(tp, tp + fn, "Recall", flags),
    }
    return MetricReport(values, flags)


def cohen_kappa(counts: np.ndarray) -> Optional[float]:
    """Cohen's kappa；矩陣為空或 p_e = 1 時回傳 None"""
    counts = counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        return None
    po = np.trace(counts) / total
    pe = float((counts.sum(axis=0) * counts.sum(axis=1)).sum()) / (total * total)
    if pe == 1.0:
        return None
    return (po - pe) / (1.0 - pe)


def binary_change_counts(counts: np.ndarray) -> np.ndarray:
    """把 SCD 矩陣摺疊成未變化／變化的 2x2 矩陣"""
    collapsed = np.zeros((2, 2), dtype=np.float64)
    collapsed[0, 0] = counts[0, 0]
    collapsed[0, 1] = counts[0, 1:].sum()
    collapsed[1, 0] = counts[1:, 0].sum()
    collapsed[1, 1] = counts[1:, 1:].sum()
    return collapsed


def scd_metrics(cm_sem: ConfusionMatrix) -> MetricReport:
    """
    SECOND 協定的 mIoU、SeK 與 F_scd

    - mIoU = (IoU_未變化 + IoU_變化) / 2，於摺疊後的 2x2 矩陣計算
    - SeK = exp(IoU_變化 - 1) * κ̂，κ̂ 為 (0,0) 歸零後矩陣的 kappa；負 kappa 截為 0
    - F_scd = 2PR/(P+R)，P、R 為變化區域上語意正確像素對預測／真值變化像素的比例

    Args:
        cm_sem: (K+1)x(K+1) 混淆矩陣，索引 0 為未變化

    Returns:
        MetricReport: mIoU / SeK / F_scd / IoU_nc / IoU_c / kappa（百分比）
    """
    counts = cm_sem.counts.astype(np.float64)
    if counts.shape[0] < 2:
        raise DataError(f"SCD 指標至少需要 2x2 矩陣，收到 {counts.shape}")
    flags: List[str] = []

    binary = binary_change_counts(counts)
    diag = np.diag(binary)
    unions = binary.sum(axis=1) + binary.sum(axis=0) - diag
    iou_nc = _ratio(diag[0], unions[0], "IoU_nc", flags)
    iou_c = _ratio(diag[1], unions[1], "IoU_c", flags)

    zeroed = counts.copy()
    zeroed[0, 0] = 0
    kappa = cohen_kappa(zeroed)
    if kappa is None:
        flags.append("SeK")
        kappa = 0.0
    elif kappa < 0:
        flags.append("kappa_negative")
        kappa = 0.0
    sek = math.exp(iou_c - 1.0) * kappa if "SeK" not in flags else 0.0

    correct_changed = float(np.trace(counts[1:, 1:]))
    precision = _ratio(correct_changed, counts[:, 1:].sum(), "P_scd", flags)
    recall = _ratio(correct_changed, counts[1:, :].sum(), "R_scd", flags)
    f_scd = _ratio(2 * precision * recall, precision + recall, "F_scd", flags)

    values = {
        "mIoU": 100.0 * (iou_nc + iou_c) / 2.0,
        "SeK": 100.0 * sek,
        "F_scd": 100.0 * f_scd,
        "IoU_nc": 100.0 * iou_nc,
        "IoU_c": 100.0 * iou_c,
        "kappa": 100.0 * kappa,
    }
    return MetricReport(values, flags)


def scd_label_map(sem_map, change_map, ignore_index: int = 255) -> np.ndarray:
    """把語意圖與變化圖組成 SCD 標籤：未變化為 0，變化像素為類別 + 1"""
    sem = np.asarray(sem_map).astype(np.int64)
    change = np.asarray(change_map).astype(np.int64)
    labels = np.where(change > 0, sem + 1, 0)
    return np.where(sem == ignore_index, ignore_index, labels)


def per_class_accuracy(cm: ConfusionMatrix) -> Dict[int, Optional[float]]:
    """每個真值類別的像素準確率（百分比）；該類別沒有像素時為 None"""
    result: Dict[int, Optional[float]] = {}
    for k in range(cm.num_classes):
        row = cm.counts[k].sum()
        result[k] = None if row == 0 else 100.0 * cm.counts[k, k] / row
    return result


def assign_stratum(change_ratio: float) -> Optional[str]:
    if change_ratio < SMALL_CHANGE_THRESHOLD:
        return "small"
    if change_ratio > LARGE_CHANGE_THRESHOLD:
        return "large"
    return None


@dataclass
class StratumEntry:
    count: int
    per_class_oa: Dict[str, Optional[float]]
    deltas: Dict[str, Optional[float]] = field(default_factory=dict)


@dataclass
class StratumReport:
    """依每個樣本變化比例分層的 per-class OA 與兩次執行間的差值"""

    strata: Dict[str, StratumEntry]
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "strata": {
                name: {
                    "count": entry.count,
                    "per_class_oa": entry.per_class_oa,
                    "deltas": entry.deltas,
                }
                for name, entry in self.strata.items()
            },
            "notes": list(self.notes),
        }


def _stratum_matrices(
    samples: Iterable[Tuple[np.ndarray, np.ndarray, float]],
    num_classes: int,
    ignore_index: Optional[int],
) -> Dict[str, Tuple[int, ConfusionMatrix]]:
    result = {name: (0, ConfusionMatrix.empty(num_classes)) for name in STRATA}
    for pred, gt, ratio in samples:
        if not 0.0 <= ratio <= 1.0:
            raise DataError(f"change_ratio 必須介於 [0, 1]，收到 {ratio}")
        targets = ["all"]
        stratum = assign_stratum(ratio)
        if stratum is not None:
            targets.append(stratum)
        for name in targets:
            count, cm = result[name]
            result[name] = (count + 1, cm.accumulate(pred, gt, ignore_index))
    return result


def stratified_report(
    samples: Sequence[Tuple[np.ndarray, np.ndarray, float]],
    class_names: Sequence[str],
    baseline: Optional[Sequence[Tuple[np.ndarray, np.ndarray, float]]] = None,
    ignore_index: Optional[int] = 255,
) -> StratumReport:
    """
    依變化比例分層（small < 5%、large > 25%、all）計算 per-class OA

    Args:
        samples: (預測標籤圖, 真值標籤圖, 變化比例) 列表
        class_names: 標籤索引對應的名稱
        baseline: 另一次執行的相同樣本；有提供時計算 OA 差值（本次 - baseline）
        ignore_index: 略過的真值標籤

    Returns:
        StratumReport: 空的分層會被省略並記錄在 notes
    """
    num_classes = len(class_names)
    current = _stratum_matrices(samples, num_classes, ignore_index)
    reference = _stratum_matrices(baseline, num_classes, ignore_index) if baseline is not None else None

    strata: Dict[str, StratumEntry] = {}
    notes: List[str] = []
    for name in STRATA:
        count, cm = current[name]
        if count == 0:
            notes.append(f"{name} 分層沒有樣本，已省略")
            continue
        oa = {class_names[k]: v for k, v in per_class_accuracy(cm).items()}
        entry = StratumEntry(count=count, per_class_oa=oa)
        if reference is not None:
            base_oa = {class_names[k]: v for k, v in per_class_accuracy(reference[name][1]).items()}
            entry.deltas = {
                key: (None if oa[key] is None or base_oa[key] is None else oa[key] - base_oa[key])
                for key in oa
            }
        strata[name] = entry
    return StratumReport(strata=strata, notes=notes)


def format_table(rows: Sequence[Dict[str, object]], columns: Sequence[str]) -> str:
    """輸出對齊的純文字表格，數值一律保留兩位小數"""

    def render(value: object) -> str:
        if value is None:
            return "-"
        if isinstance(value, float):
            return f"{value:.2f}"
        return str(value)

    cells = [[render(row.get(col)) for col in columns] for row in rows]
    widths = [max([len(col)] + [len(r[i]) for r in cells]) for i, col in enumerate(columns)]
    lines = [" | ".join(col.ljust(w) for col, w in zip(columns, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    for r in cells:
        lines.append(" | ".join(value.ljust(w) for value, w in zip(r, widths)))
    return "\n".join(lines)


def write_report(report: Dict, directory: str, name: str = "metrics") -> Tuple[str, str]:
    """
    寫出 JSON 與對齊表格兩種格式的指標報告

    Returns:
        tuple: (json 路徑, txt 路徑)
    """
    os.makedirs(directory, exist_ok=True)
    json_path = os.path.join(directory, f"{name}.json")
    txt_path = os.path.join(directory, f"{name}.txt")
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, ensure_ascii=False, sort_keys=True)

    sections = []
    for section, content in report.items():
        if isinstance(content, dict) and "values" in content:
            columns = list(content["values"].keys())
            sections.append(f"[{section}]\n" + format_table([content["values"]], columns))
        elif isinstance(content, dict) and "strata" in content:
            for stratum, entry in content["strata"].items():
                rows = [
                    {"class": key, "OA": value, "delta": entry["deltas"].get(key)}
                    for key, value in entry["per_class_oa"].items()
                ]
                sections.append(
                    f"[{section}: {stratum}, n={entry['count']}]\n"
                    + format_table(rows, ["class", "OA", "delta"])
                )
    with open(txt_path, "w", encoding="utf-8") as f:
        f.write("\n\n".join(sections) + "\n")
    return json_path, txt_path
