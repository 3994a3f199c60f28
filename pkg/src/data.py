"""
資料模組 - 雙時相目錄資料集讀取器與合成雙時相資料產生器

目錄佈局：
  - bcd：A/、B/、label/
  - scd：A/、B/、labelA/、labelB/，可選 change/

影像為 8-bit PNG，標籤為單通道（索引色或灰階）PNG；語意標籤 0..K-1，255 為未標註。
"""

import json
import logging
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image, ImageDraw
from torch.utils.data import Dataset

from .config import DatasetSpec, Layout, SynthSpec
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

MAX_SYNTH_ATTEMPTS = 100
CHANGE_RATIO_TOLERANCE = 0.2


@dataclass
class BiTemporalSample:
    """
    一組雙時相樣本

    Attributes:
        image_t1, image_t2: [3, H, W] float32，數值介於 [0, 1]
        change_mask: [H, W] uint8，1 表示變化
        sem_t1, sem_t2: [H, W] int64 語意標籤；BCD 樣本為 None
        sample_id: 樣本識別碼
    """

    image_t1: np.ndarray
    image_t2: np.ndarray
    change_mask: np.ndarray
    sem_t1: Optional[np.ndarray] = None
    sem_t2: Optional[np.ndarray] = None
    sample_id: str = ""

    @property
    def size(self) -> Tuple[int, int]:
        return tuple(self.change_mask.shape)

    @property
    def change_ratio(self) -> float:
        if self.change_mask.size == 0:
            return 0.0
        return float(np.count_nonzero(self.change_mask)) / self.change_mask.size

    @property
    def has_semantics(self) -> bool:
        return self.sem_t1 is not None and self.sem_t2 is not None

    def to_tensors(self, include_semantics: bool = True) -> Dict[str, object]:
        item: Dict[str, object] = {
            "image_t1": torch.from_numpy(np.ascontiguousarray(self.image_t1, dtype=np.float32)),
            "image_t2": torch.from_numpy(np.ascontiguousarray(self.image_t2, dtype=np.float32)),
            "change": torch.from_numpy(self.change_mask.astype(np.int64)),
            "change_ratio": self.change_ratio,
            "id": self.sample_id,
        }
        if include_semantics and self.has_semantics:
            item["sem_t1"] = torch.from_numpy(self.sem_t1.astype(np.int64))
            item["sem_t2"] = torch.from_numpy(self.sem_t2.astype(np.int64))
        return item


# ---------------------------------------------------------------------------
# 目錄資料集
# ---------------------------------------------------------------------------


def _read_png(path: str) -> Image.Image:
    if not os.path.exists(path):
        raise DataError(f"找不到檔案: {path}")
    try:
        return Image.open(path)
    except OSError as e:
        raise DataError(f"無法讀取影像 {path}: {e}") from None


def _read_raster(path: str) -> np.ndarray:
    image = _read_png(path).convert("RGB")
    return (np.asarray(image, dtype=np.float32) / 255.0).transpose(2, 0, 1)


def _read_label(path: str) -> np.ndarray:
    image = _read_png(path)
    if image.mode not in ("P", "L", "1", "I", "I;16"):
        raise DataError(f"標籤必須是單通道 PNG，{path} 的模式為 {image.mode}")
    return np.asarray(image).astype(np.int64)


def _check_semantic_range(label: np.ndarray, num_classes: int, ignore_index: int, path: str) -> None:
    invalid = (label != ignore_index) & ((label < 0) | (label >= num_classes))
    if invalid.any():
        bad = int(label[invalid][0])
        raise DataError(f"{path} 含有標籤 {bad}，超出類別數 K={num_classes}")


def load_sample(spec: DatasetSpec, sample_id: str) -> BiTemporalSample:
    """
    讀取一個樣本

    Args:
        spec: 資料集描述
        sample_id: 不含副檔名的樣本識別碼

    Returns:
        BiTemporalSample: 影像已正規化到 [0, 1]

    Raises:
        DataError: 缺少檔案、尺寸不符或標籤超出範圍
    """
    def path(folder: str) -> str:
        return os.path.join(spec.root, folder, f"{sample_id}.png")

    image_t1 = _read_raster(path("A"))
    image_t2 = _read_raster(path("B"))
    arrays: Dict[str, Tuple[int, int]] = {"A": image_t1.shape[1:], "B": image_t2.shape[1:]}

    sem_t1 = sem_t2 = None
    if spec.layout == Layout.BCD:
        change = (_read_label(path("label")) > 0).astype(np.uint8)
        arrays["label"] = change.shape
    else:
        sem_t1 = _read_label(path("labelA"))
        sem_t2 = _read_label(path("labelB"))
        arrays["labelA"] = sem_t1.shape
        arrays["labelB"] = sem_t2.shape
        if os.path.exists(path("change")):
            # 提供的 change/ 優先於推導結果
            change = (_read_label(path("change")) > 0).astype(np.uint8)
            arrays["change"] = change.shape
        else:
            change = None

    reference = tuple(arrays["A"])
    for name, shape in arrays.items():
        if tuple(shape) != reference:
            raise DataError(
                f"樣本 {sample_id} 尺寸不符: A 為 {reference}，{name} 為 {tuple(shape)}"
            )

    if sem_t1 is not None:
        num_classes = len(spec.class_names)
        _check_semantic_range(sem_t1, num_classes, spec.ignore_index, path("labelA"))
        _check_semantic_range(sem_t2, num_classes, spec.ignore_index, path("labelB"))
        if change is None:
            valid = (sem_t1 != spec.ignore_index) & (sem_t2 != spec.ignore_index)
            change = ((sem_t1 != sem_t2) & valid).astype(np.uint8)

    return BiTemporalSample(image_t1, image_t2, change, sem_t1, sem_t2, sample_id)


def read_split(spec: DatasetSpec, split: str) -> List[str]:
    """讀取 split 檔（每行一個樣本識別碼）"""
    if split not in spec.splits:
        raise DataError(f"未定義的 split: {split}（可用: {', '.join(sorted(spec.splits))}）")
    split_path = os.path.join(spec.root, spec.splits[split])
    if not os.path.isdir(spec.root):
        raise DataError(f"找不到資料集根目錄: {spec.root}")
    if not os.path.exists(split_path):
        raise DataError(f"找不到 split 檔: {split_path}")
    with open(split_path, "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


class ChangeDetectionDataset(Dataset):
    """
    目錄式雙時相資料集

    讀取器在建構後不保留可變狀態，可供多個 DataLoader worker 同時讀取。
    大於 patch_size 的樣本以樣本索引為種子裁切成 patch_size；patch_size 為 None 時回傳完整影像。
    """

    def __init__(self, spec: DatasetSpec, split: str = "train", include_semantics: bool = True):
        spec.validate()
        self.spec = spec
        self.include_semantics = include_semantics and spec.layout == Layout.SCD
        ids = read_split(spec, split)
        if spec.min_change_ratio > 0:
            kept = [i for i in ids if load_sample(spec, i).change_ratio >= spec.min_change_ratio]
            logger.info(
                "min_change_ratio=%.3f 過濾: %d → %d 個樣本", spec.min_change_ratio, len(ids), len(kept)
            )
            ids = kept
        self.ids = ids

    def __len__(self) -> int:
        return len(self.ids)

    def sample(self, index: int) -> BiTemporalSample:
        sample = load_sample(self.spec, self.ids[index])
        height, width = sample.size
        patch = self.spec.patch_size
        if patch is None:
            if height % 32 or width % 32:
                raise DataError(f"樣本 {sample.sample_id} 尺寸 {sample.size} 不是 32 的倍數，無法整張評估")
            return sample
        if height < patch or width < patch:
            raise DataError(
                f"樣本 {sample.sample_id} 尺寸 {sample.size} 小於 patch_size={patch}"
            )
        if (height, width) != (patch, patch):
            sample = crop_augment(sample, patch, seed=index)
        return sample

    def __getitem__(self, index: int) -> Dict[str, object]:
        return self.sample(index).to_tensors(self.include_semantics)


# ---------------------------------------------------------------------------
# 合成資料
# ---------------------------------------------------------------------------


def class_palette(num_classes: int) -> np.ndarray:
    """每個類別一個固定的 RGB 顏色，[K, 3] float32"""
    cmap = colormaps["tab20"]
    return np.asarray([cmap(i % 20)[:3] for i in range(num_classes)], dtype=np.float32)


def _random_box(rng: np.random.Generator, height: int, width: int, area: Optional[float] = None):
    if area is None:
        box_h = int(rng.integers(max(2, height // 8), max(3, height // 2) + 1))
        box_w = int(rng.integers(max(2, width // 8), max(3, width // 2) + 1))
    else:
        aspect = float(rng.uniform(0.5, 2.0))
        box_h = int(np.clip(round(np.sqrt(area * aspect)), 1, height))
        box_w = int(np.clip(round(area / box_h), 1, width))
    top = int(rng.integers(0, height - box_h + 1))
    left = int(rng.integers(0, width - box_w + 1))
    return left, top, left + box_w - 1, top + box_h - 1


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, box, fill: int) -> None:
    if shape == "rectangles":
        draw.rectangle(box, fill=fill)
    else:
        draw.ellipse(box, fill=fill)


def _region_layout(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """區域編號圖：0 為背景，1..num_regions 為疊加的形狀"""
    height, width = spec.canvas
    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for region in range(1, spec.num_regions + 1):
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        _draw_shape(draw, shape, _random_box(rng, height, width), region)
    return np.asarray(canvas).astype(np.int64)


def _different_class(rng: np.random.Generator, current: int, num_classes: int) -> int:
    offset = int(rng.integers(1, num_classes))
    return (current + offset) % num_classes


def _mutate(
    spec: SynthSpec,
    regions: np.ndarray,
    sem_t1: np.ndarray,
    target: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    複製第一時相後改變選定區域的類別；不足的部分以額外形狀補上
    """
    sem_t2 = sem_t1.copy()
    total = sem_t1.size
    budget = target * total
    upper = budget * (1.0 + CHANGE_RATIO_TOLERANCE)

    def changed() -> int:
        return int(np.count_nonzero(sem_t1 != sem_t2))

    order = rng.permutation(int(regions.max()) + 1)
    for region in order:
        mask = regions == region
        area = int(np.count_nonzero(mask))
        if area == 0 or changed() + area > upper:
            continue
        current = int(sem_t1[mask][0])
        sem_t2[mask] = _different_class(rng, current, spec.num_classes)

    height, width = spec.canvas
    lower = budget * (1.0 - CHANGE_RATIO_TOLERANCE)
    for _ in range(8):
        remaining = budget - changed()
        if changed() >= lower or remaining < 1:
            break
        patch = Image.new("L", (width, height), 0)
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        area = max(1.0, remaining * float(rng.uniform(0.8, 1.1)))
        _draw_shape(ImageDraw.Draw(patch), shape, _random_box(rng, height, width, area), 1)
        mask = np.asarray(patch) > 0
        new_class = int(rng.integers(spec.num_classes))
        sem_t2[mask] = new_class
    return sem_t2


def _render(sem: np.ndarray, palette: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    texture = rng.normal(0.0, 0.03, size=(3,) + sem.shape).astype(np.float32)
    return np.clip(palette[sem].transpose(2, 0, 1) + texture, 0.0, 1.0)


def _jitter(image: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    """全域亮度／對比／色偏擾動（偽變化），不影響任何標籤"""
    if noise == 0:
        return image
    gain = 1.0 + rng.uniform(-noise, noise)
    bias = rng.uniform(-noise, noise, size=(3, 1, 1)) * 0.5
    return np.clip(image * gain + bias, 0.0, 1.0).astype(np.float32)


def synth_pair(spec: SynthSpec, sample_id: str = "synth") -> BiTemporalSample:
    """
    產生一組合成雙時相樣本

    第一時相為著色的類別區域；第二時相複製第一時相後改變部分區域的類別
    （真實變化），再加上全域亮度擾動（偽變化）。變化遮罩只反映類別轉換。

    Args:
        spec: 產生參數（seed 決定全部隨機選擇）
        sample_id: 樣本識別碼

    Returns:
        BiTemporalSample: 變化比例落在目標 ±20% 內

    Raises:
        DataError: 100 次嘗試都無法達到目標比例
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    target = spec.change_ratio_target
    if spec.change_ratio_range is not None:
        low, high = spec.change_ratio_range
        target = float(rng.uniform(low, high))

    palette = class_palette(spec.num_classes)
    for attempt in range(MAX_SYNTH_ATTEMPTS):
        regions = _region_layout(spec, rng)
        region_classes = rng.integers(spec.num_classes, size=int(regions.max()) + 1)
        sem_t1 = region_classes[regions]
        sem_t2 = _mutate(spec, regions, sem_t1, target, rng)
        change = (sem_t1 != sem_t2).astype(np.uint8)
        ratio = float(change.mean())
        if abs(ratio - target) <= CHANGE_RATIO_TOLERANCE * target:
            image_t1 = _render(sem_t1, palette, rng)
            image_t2 = _jitter(_render(sem_t2, palette, rng), spec.pseudo_change_noise, rng)
            if attempt:
                logger.debug("樣本 %s 在第 %d 次嘗試達到變化比例 %.3f", sample_id, attempt + 1, ratio)
            return BiTemporalSample(image_t1, image_t2, change, sem_t1, sem_t2, sample_id)

    raise DataError(
        f"無法在 {MAX_SYNTH_ATTEMPTS} 次嘗試內產生變化比例 {target:.3f}±{CHANGE_RATIO_TOLERANCE:.0%} 的樣本"
    )


def sample_seed(base_seed: int, stream: int, index: int) -> int:
    """每個樣本獨立的種子，與樣本產生順序無關"""
    return int(np.random.SeedSequence([base_seed, stream, index]).generate_state(1)[0])


class SynthDataset(Dataset):
    """
    可重現的合成資料集；stream 區分 train（0）與 test（1）

    樣本在第一次讀取時產生並快取。
    """

    def __init__(
        self,
        spec: SynthSpec,
        size: int,
        stream: int = 0,
        include_semantics: bool = True,
        crop_size: Optional[int] = None,
    ):
        spec.validate()
        if size < 0:
            raise ConfigError(f"資料集大小不可為負: {size}")
        self.spec = spec
        self.size = size
        self.stream = stream
        self.include_semantics = include_semantics
        self.crop_size = crop_size
        self._cache: Dict[int, BiTemporalSample] = {}

    def __len__(self) -> int:
        return self.size

    def sample(self, index: int) -> BiTemporalSample:
        if not 0 <= index < self.size:
            raise IndexError(index)
        if index not in self._cache:
            seed = sample_seed(self.spec.seed, self.stream, index)
            sample = synth_pair(replace(self.spec, seed=seed), f"synth_{self.stream}_{index:05d}")
            if self.crop_size is not None:
                sample = crop_augment(sample, self.crop_size, seed)
            self._cache[index] = sample
        return self._cache[index]

    def __getitem__(self, index: int) -> Dict[str, object]:
        return self.sample(index).to_tensors(self.include_semantics)


def crop_augment(sample: BiTemporalSample, out_size: int, seed: int) -> BiTemporalSample:
    """
    以相同視窗裁切兩張影像與所有遮罩

    Args:
        sample: 原始樣本
        out_size: 裁切邊長（<= 畫布且能被 32 整除）
        seed: 決定裁切位置

    Returns:
        BiTemporalSample: 裁切後的樣本；out_size 等於畫布時原樣回傳
    """
    height, width = sample.size
    if out_size > min(height, width):
        raise DataError(f"裁切尺寸 {out_size} 大於畫布 {height}x{width}")
    if out_size % 32 != 0:
        raise DataError(f"裁切尺寸 {out_size} 必須能被 32 整除")
    if (height, width) == (out_size, out_size):
        return sample

    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, height - out_size + 1))
    left = int(rng.integers(0, width - out_size + 1))
    window = (slice(top, top + out_size), slice(left, left + out_size))

    def crop(array: Optional[np.ndarray]) -> Optional[np.ndarray]:
        if array is None:
            return None
        return array[(Ellipsis,) + window].copy()

    return BiTemporalSample(
        image_t1=crop(sample.image_t1),
        image_t2=crop(sample.image_t2),
        change_mask=crop(sample.change_mask),
        sem_t1=crop(sample.sem_t1),
        sem_t2=crop(sample.sem_t2),
        sample_id=sample.sample_id,
    )


# ---------------------------------------------------------------------------
# 寫出資料集
# ---------------------------------------------------------------------------


def _to_uint8_image(raster: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(raster.transpose(1, 2, 0) * 255.0).astype(np.uint8))


def _indexed_label(label: np.ndarray, palette: np.ndarray) -> Image.Image:
    height, width = label.shape
    image = Image.frombytes("P", (width, height), np.ascontiguousarray(label, dtype=np.uint8).tobytes())
    flat = (np.round(palette * 255).astype(np.uint8)).ravel().tolist()
    image.putpalette(flat + [0] * (768 - len(flat)))
    return image


def write_sample(sample: BiTemporalSample, root: str, layout: Layout = Layout.SCD) -> None:
    """把樣本寫成目錄佈局中的 PNG 檔"""
    name = f"{sample.sample_id}.png"
    folders = ["A", "B"] + (["label"] if layout == Layout.BCD else ["labelA", "labelB", "change"])
    for folder in folders:
        os.makedirs(os.path.join(root, folder), exist_ok=True)

    _to_uint8_image(sample.image_t1).save(os.path.join(root, "A", name))
    _to_uint8_image(sample.image_t2).save(os.path.join(root, "B", name))
    change = Image.fromarray((sample.change_mask > 0).astype(np.uint8) * 255)
    if layout == Layout.BCD:
        change.save(os.path.join(root, "label", name))
        return
    if not sample.has_semantics:
        raise DataError(f"樣本 {sample.sample_id} 沒有語意標籤，無法寫成 SCD 佈局")
    palette = class_palette(int(max(sample.sem_t1.max(), sample.sem_t2.max())) + 1)
    _indexed_label(sample.sem_t1, palette).save(os.path.join(root, "labelA", name))
    _indexed_label(sample.sem_t2, palette).save(os.path.join(root, "labelB", name))
    change.save(os.path.join(root, "change", name))


def write_synthetic_dataset(
    spec: SynthSpec,
    root: str,
    n: int,
    class_names: Sequence[str],
    layout: Layout = Layout.SCD,
    test_fraction: float = 0.2,
) -> Dict[str, object]:
    """
    產生 n 個合成樣本並寫成目錄資料集，附 split 檔與 manifest.json

    Returns:
        dict: manifest 內容
    """
    if n < 1:
        raise ConfigError(f"樣本數必須 >= 1，目前為 {n}")
    if len(class_names) != spec.num_classes:
        raise ConfigError(f"class_names 數量 {len(class_names)} 與 num_classes={spec.num_classes} 不符")
    dataset = SynthDataset(spec, n)
    ids, ratios = [], []
    for index in range(n):
        sample = replace(dataset.sample(index), sample_id=f"{index:05d}")
        write_sample(sample, root, layout)
        ids.append(sample.sample_id)
        ratios.append(sample.change_ratio)

    num_test = int(round(n * test_fraction))
    splits = {"train": ids[: n - num_test], "test": ids[n - num_test :], "all": ids}
    for split, split_ids in splits.items():
        with open(os.path.join(root, f"{split}.txt"), "w", encoding="utf-8") as f:
            f.write("".join(f"{i}\n" for i in split_ids))

    manifest = {
        "layout": layout.value,
        "class_names": list(class_names),
        "synth": {
            "canvas": list(spec.canvas),
            "num_classes": spec.num_classes,
            "change_ratio_target": spec.change_ratio_target,
            "change_ratio_range": spec.change_ratio_range,
            "shapes": list(spec.shapes),
            "pseudo_change_noise": spec.pseudo_change_noise,
            "num_regions": spec.num_regions,
            "seed": spec.seed,
        },
        "count": n,
        "change_ratios": [round(r, 6) for r in ratios],
        "mean_change_ratio": float(np.mean(ratios)),
    }
    with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False)
    logger.info("已寫出 %d 個合成樣本到 %s（平均變化比例 %.3f）", n, root, manifest["mean_change_ratio"])
    return manifest
