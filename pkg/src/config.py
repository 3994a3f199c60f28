"""
設定模組 - 以 dataclass 描述模型、TTG、損失、最佳化與資料設定

設定檔為 JSON；環境變數（可由 .env 載入）提供執行目錄、裝置等預設值。
"""

import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence

from .errors import ConfigError

# SegFormer 式的四層步距，整個架構都依賴這個契約
STAGE_STRIDES = [4, 8, 16, 32]

SECOND_CLASS_NAMES = [
    "non_vegetated_ground_surface",
    "tree",
    "low_vegetation",
    "water",
    "building",
    "playground",
]


class Task(Enum):
    """變化偵測任務類型"""

    BCD = "BCD"  # 二元變化偵測
    SCD = "SCD"  # 語意變化偵測


class Directionality(Enum):
    """重建約束的方向"""

    ONE_WAY_EQ1 = "one_way_eq1"  # 只產生 Î_2 = I_1 + Δ_2
    ONE_WAY_EQ2 = "one_way_eq2"  # 只產生 Î_1 = I_2 + Δ_1
    TWO_WAY = "two_way"


class Layout(Enum):
    """資料集目錄結構"""

    BCD = "bcd"  # A/, B/, label/
    SCD = "scd"  # A/, B/, labelA/, labelB/, change/


@dataclass
class ModelConfig:
    """孿生編碼器與三分支解碼器的設定"""

    in_channels: int = 3
    stage_channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128])
    stage_strides: List[int] = field(default_factory=lambda: list(STAGE_STRIDES))
    num_classes: int = 6
    task: Task = Task.SCD
    decoder_dim: int = 64
    blocks_per_stage: int = 2
    attention_heads: int = 1
    sr_ratios: List[int] = field(default_factory=lambda: [8, 4, 2, 1])

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigError(f"in_channels 必須 >= 1，目前為 {self.in_channels}")
        if len(self.stage_channels) != 4:
            raise ConfigError(
                f"stage_channels 必須有 4 個值，目前為 {len(self.stage_channels)} 個"
            )
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError(f"stage_channels 必須嚴格遞增: {self.stage_channels}")
        if list(self.stage_strides) != STAGE_STRIDES:
            raise ConfigError(
                f"stage_strides 必須為 {STAGE_STRIDES}，目前為 {self.stage_strides}"
            )
        if len(self.sr_ratios) != 4 or any(r < 1 for r in self.sr_ratios):
            raise ConfigError(f"sr_ratios 必須是 4 個正整數: {self.sr_ratios}")
        if self.task == Task.SCD and self.num_classes < 2:
            raise ConfigError(f"SCD 任務需要 num_classes >= 2，目前為 {self.num_classes}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes 必須 >= 1，目前為 {self.num_classes}")
        if self.decoder_dim < 1 or self.blocks_per_stage < 0:
            raise ConfigError("decoder_dim 必須 >= 1 且 blocks_per_stage 必須 >= 0")
        for channels in self.stage_channels:
            if channels % self.attention_heads != 0:
                raise ConfigError(
                    f"stage 通道數 {channels} 無法被 attention_heads={self.attention_heads} 整除"
                )


@dataclass
class TTGConfig:
    """Text-guided Transition Generator 的設定"""

    num_experts: int = 6
    fusion_dim: int = 256
    decoder_layers: int = 6
    attention_heads: int = 4
    asi_enabled: bool = True
    # None 表示依任務決定：SCD 為 two_way，BCD 為 one_way_eq2
    directionality: Optional[Directionality] = None
    text_dim: int = 512
    prompt_template: str = "a photo of {}"
    embedding_file: Optional[str] = field(
        default_factory=lambda: os.getenv("TGCD_EMBEDDING_FILE") or None
    )
    embedding_seed: int = 0
    pos_grid: int = 8

    def validate(self) -> None:
        if self.num_experts < 1:
            raise ConfigError(f"num_experts 必須 >= 1，目前為 {self.num_experts}")
        if self.fusion_dim < 1 or self.fusion_dim % self.attention_heads != 0:
            raise ConfigError(
                f"fusion_dim={self.fusion_dim} 必須能被 attention_heads={self.attention_heads} 整除"
            )
        if self.decoder_layers < 0:
            raise ConfigError(f"decoder_layers 不可為負，目前為 {self.decoder_layers}")
        if self.text_dim < 1 or self.pos_grid < 1:
            raise ConfigError("text_dim 與 pos_grid 必須 >= 1")
        if "{}" not in self.prompt_template:
            raise ConfigError(f"prompt_template 必須包含 '{{}}': {self.prompt_template!r}")

    def resolved_directionality(self, task: Task) -> Directionality:
        if self.directionality is not None:
            return self.directionality
        return Directionality.TWO_WAY if task == Task.SCD else Directionality.ONE_WAY_EQ2


@dataclass
class LossWeights:
    """總損失的權重與開關（即消融矩陣的損失軸）"""

    lambda1: float = 0.1
    lambda2: float = 1.0
    tau: float = 0.07
    enable_recon: bool = True
    enable_trans: bool = True
    ignore_index: int = 255

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"tau 必須 > 0，目前為 {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(
                f"lambda 必須 >= 0，目前為 lambda1={self.lambda1}, lambda2={self.lambda2}"
            )


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    schedule: str = "linear"  # linear: 最後一步衰減到 0；constant: 固定
    grad_clip: Optional[float] = None

    def validate(self) -> None:
        if self.kind != "adam":
            raise ConfigError(f"不支援的 optimizer: {self.kind}（僅支援 adam）")
        if self.lr < 0:
            raise ConfigError(f"lr 不可為負，目前為 {self.lr}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} 必須介於 [0, 1)，目前為 {value}")
        if self.schedule not in ("linear", "constant"):
            raise ConfigError(f"不支援的 schedule: {self.schedule}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip 必須 > 0，目前為 {self.grad_clip}")


@dataclass
class SynthSpec:
    """合成雙時相資料的產生參數"""

    canvas: List[int] = field(default_factory=lambda: [64, 64])
    num_classes: int = 6
    change_ratio_target: float = 0.25
    # 若設定則每個樣本的目標變化比例從此區間均勻抽樣
    change_ratio_range: Optional[List[float]] = None
    shapes: List[str] = field(default_factory=lambda: ["rectangles", "blobs"])
    pseudo_change_noise: float = 0.1
    num_regions: int = 6
    seed: int = 0

    def validate(self) -> None:
        if len(self.canvas) != 2 or min(self.canvas) < 1:
            raise ConfigError(f"canvas 必須是兩個正整數: {self.canvas}")
        if self.num_classes < 2:
            raise ConfigError(f"合成資料至少需要 2 個類別，目前為 {self.num_classes}")
        if not 0.0 <= self.change_ratio_target <= 1.0:
            raise ConfigError(
                f"change_ratio_target 必須介於 [0, 1]，目前為 {self.change_ratio_target}"
            )
        if self.change_ratio_range is not None:
            low, high = self.change_ratio_range
            if not 0.0 <= low <= high <= 1.0:
                raise ConfigError(f"change_ratio_range 不合法: {self.change_ratio_range}")
        unknown = set(self.shapes) - {"rectangles", "blobs"}
        if not self.shapes or unknown:
            raise ConfigError(f"shapes 只能包含 rectangles/blobs: {self.shapes}")
        if self.pseudo_change_noise < 0:
            raise ConfigError("pseudo_change_noise 不可為負")


@dataclass
class DatasetSpec:
    """目錄式資料集描述"""

    root: str = ""
    layout: Layout = Layout.SCD
    # None 表示不裁切，直接使用完整影像（評估時）
    patch_size: Optional[int] = 256
    class_names: List[str] = field(default_factory=lambda: list(SECOND_CLASS_NAMES))
    splits: Dict[str, str] = field(
        default_factory=lambda: {"train": "train.txt", "test": "test.txt"}
    )
    # 資料前處理政策：丟棄變化比例低於此值的樣本（HRSCD 使用 0.05）
    min_change_ratio: float = 0.0
    ignore_index: int = 255

    def validate(self) -> None:
        if self.patch_size is not None and (self.patch_size < 32 or self.patch_size % 32 != 0):
            raise ConfigError(f"patch_size 必須是 32 的正整數倍，目前為 {self.patch_size}")
        if not self.class_names:
            raise ConfigError("class_names 不可為空")
        if not 0.0 <= self.min_change_ratio <= 1.0:
            raise ConfigError(f"min_change_ratio 必須介於 [0, 1]: {self.min_change_ratio}")


@dataclass
class DataConfig:
    """訓練／評估資料來源"""

    kind: str = "synthetic"  # synthetic 或 directory
    class_names: List[str] = field(default_factory=lambda: list(SECOND_CLASS_NAMES))
    synth: SynthSpec = field(default_factory=SynthSpec)
    directory: DatasetSpec = field(default_factory=DatasetSpec)
    train_size: int = 200
    test_size: int = 50
    crop_size: Optional[int] = None

    def validate(self) -> None:
        if self.kind not in ("synthetic", "directory"):
            raise ConfigError(f"data.kind 只能是 synthetic 或 directory，目前為 {self.kind}")
        if len(set(self.class_names)) != len(self.class_names) or not self.class_names:
            raise ConfigError(f"class_names 必須非空且不重複: {self.class_names}")
        if self.kind == "synthetic":
            self.synth.validate()
            if self.synth.num_classes != len(self.class_names):
                raise ConfigError(
                    f"synth.num_classes={self.synth.num_classes} 與 class_names 數量 "
                    f"{len(self.class_names)} 不符"
                )
            if self.train_size < 1 or self.test_size < 0:
                raise ConfigError("train_size 必須 >= 1 且 test_size 必須 >= 0")
        else:
            self.directory.validate()
            if list(self.directory.class_names) != list(self.class_names):
                raise ConfigError("directory.class_names 必須與 data.class_names 相同")
        if self.crop_size is not None and self.crop_size % 32 != 0:
            raise ConfigError(f"crop_size 必須能被 32 整除，目前為 {self.crop_size}")


@dataclass
class RunConfig:
    """一次訓練執行的完整設定"""

    model: ModelConfig = field(default_factory=ModelConfig)
    ttg: TTGConfig = field(default_factory=TTGConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    eval_every: int = 1
    num_workers: int = field(
        default_factory=lambda: int(os.getenv("TGCD_NUM_WORKERS", "0"))
    )
    device: str = field(default_factory=lambda: os.getenv("TGCD_DEVICE", "cpu"))
    run_dir: str = field(default_factory=lambda: os.getenv("TGCD_RUN_DIR", "./runs"))

    @property
    def task(self) -> Task:
        return self.model.task

    @property
    def directionality(self) -> Directionality:
        return self.ttg.resolved_directionality(self.model.task)

    def validate(self) -> None:
        self.model.validate()
        self.ttg.validate()
        self.losses.validate()
        self.optimizer.validate()
        self.data.validate()
        if self.model.num_classes != len(self.data.class_names):
            raise ConfigError(
                f"model.num_classes={self.model.num_classes} 與 class_names 數量 "
                f"{len(self.data.class_names)} 不符"
            )
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ConfigError("batch_size、eval_every 必須 >= 1 且 epochs 不可為負")
        if self.num_workers < 0:
            raise ConfigError(f"num_workers 不可為負，目前為 {self.num_workers}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        data = dict(data)
        # 允許在最上層寫 task，等同 model.task
        if "task" in data:
            model = dict(data.get("model") or {})
            model["task"] = data.pop("task")
            data["model"] = model
        return _from_dict(cls, data, "")

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(asdict(self), default=_json_default))


def _json_default(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    raise TypeError(f"無法序列化的型別: {type(value).__name__}")


def _from_dict(cls: type, data: Any, path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{path.rstrip('.') or '設定'} 必須是 JSON 物件")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"未知的設定欄位: {path}{unknown[0]}")
    kwargs = {name: _coerce(hints[name], value, f"{path}{name}") for name, value in data.items()}
    return cls(**kwargs)


def _coerce(hint: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        if value is None:
            return None
        inner = [arg for arg in typing.get_args(hint) if arg is not type(None)]
        return _coerce(inner[0], value, path)
    if is_dataclass(hint):
        return _from_dict(hint, value, path + ".")
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(value)
        except ValueError:
            choices = [member.value for member in hint]
            raise ConfigError(f"{path} 不支援的值 {value!r}，可用值: {choices}") from None
    if hint is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if hint in (int, float, str, bool) and not _is_exact(value, hint):
        raise ConfigError(f"{path} 型別錯誤: 需要 {hint.__name__}，收到 {value!r}")
    if origin in (list, dict) and not isinstance(value, origin):
        raise ConfigError(f"{path} 型別錯誤: 需要 {origin.__name__}，收到 {value!r}")
    return value


def _is_exact(value: Any, hint: type) -> bool:
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, hint)


def parse_override(text: str) -> "tuple[List[str], Any]":
    """
    解析 `key.path=value` 形式的覆寫

    Args:
        text: 覆寫字串

    Returns:
        tuple: (鍵路徑, 值)；值先嘗試以 JSON 解析，失敗時視為字串
    """
    if "=" not in text:
        raise ConfigError(f"覆寫格式錯誤（需要 key=value）: {text!r}")
    key, raw_value = text.split("=", 1)
    keys = [part for part in key.strip().split(".") if part]
    if not keys:
        raise ConfigError(f"覆寫缺少鍵名: {text!r}")
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    return keys, value


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    result = json.loads(json.dumps(raw))
    for text in overrides:
        keys, value = parse_override(text)
        node = result
        for key in keys[:-1]:
            child = node.get(key)
            if child is None:
                child = node[key] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"無法覆寫 {'.'.join(keys)}: {key} 不是物件")
            node = child
        node[keys[-1]] = value
    return result


def _read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError:
        raise ConfigError(f"找不到設定檔: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"設定檔解析失敗 {path}:{e.lineno}:{e.colno}: {e.msg}") from None


def load_run_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    """
    讀取 JSON 設定檔並套用覆寫

    Args:
        path: 設定檔路徑；None 表示使用全部預設值
        overrides: `key.path=value` 覆寫列表

    Returns:
        RunConfig: 已驗證的設定
    """
    raw = _read_json(path) if path is not None else {}
    config = RunConfig.from_dict(apply_overrides(raw, overrides))
    config.validate()
    return config


def load_synth_spec(path: str) -> SynthSpec:
    """讀取單獨的 SynthSpec JSON 檔"""
    spec = _from_dict(SynthSpec, _read_json(path), "")
    spec.validate()
    return spec


def save_run_config(config: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, ensure_ascii=False)
