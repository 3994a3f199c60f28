"""
訓練模組 - 訓練步驟、評估、訓練迴圈、檢查點與消融矩陣
"""

import copy
import json
import logging
import os
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from .config import Directionality, RunConfig, Task
from .consistency import (
    LOSS_TERMS,
    LossReport,
    loss_change,
    loss_recon_bitemporal,
    loss_sa,
    loss_sem,
    loss_total,
    loss_trans,
    reconstruct,
    token_labels_from_mask,
)
from .data import ChangeDetectionDataset, SynthDataset
from .embedding_provider import ClassEmbeddingSet, EmbeddingSource
from .errors import CheckpointError, DataError, TrainingError
from .metrics import (
    ConfusionMatrix,
    bcd_metrics,
    format_table,
    scd_label_map,
    scd_metrics,
    stratified_report,
)
from .model import SiameseChangeNet, build_model

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ABLATION_AXES = ("loss_terms", "asi", "directionality")

Batch = Dict[str, object]
PredictFn = Callable[[SiameseChangeNet, Batch], Dict[str, torch.Tensor]]


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


@dataclass
class TrainState:
    """模型、最佳化器狀態與訓練進度"""

    config: RunConfig
    model: SiameseChangeNet
    optimizer: torch.optim.Optimizer
    scheduler: LambdaLR
    total_steps: int
    step: int = 0
    epoch: int = 0
    best_metric: Optional[float] = None
    best_epoch: Optional[int] = None

    @property
    def device(self) -> torch.device:
        return torch.device(self.config.device)

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])


def linear_decay(total_steps: int) -> Callable[[int], float]:
    """最後一步時學習率衰減到 0"""

    def factor(step: int) -> float:
        return max(0.0, 1.0 - step / max(1, total_steps))

    return factor


def create_train_state(
    config: RunConfig,
    steps_per_epoch: int,
    class_embeddings: Optional[ClassEmbeddingSet] = None,
) -> TrainState:
    """
    依設定建立可訓練狀態

    Args:
        config: 執行設定
        steps_per_epoch: 每個 epoch 的步數（決定線性衰減長度）
        class_embeddings: 預先準備的類別嵌入；None 時依 ttg 設定取得

    Returns:
        TrainState: step 0 的狀態
    """
    config.validate()
    seed_everything(config.seed)
    model = build_model(config, class_embeddings).to(config.device)
    opt = config.optimizer
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=opt.lr,
        betas=(opt.beta1, opt.beta2),
        weight_decay=opt.weight_decay,
    )
    total_steps = max(1, config.epochs * steps_per_epoch)
    schedule = linear_decay(total_steps) if opt.schedule == "linear" else (lambda step: 1.0)
    scheduler = LambdaLR(optimizer, schedule)
    return TrainState(config, model, optimizer, scheduler, total_steps)


def _runs_ttg(config: RunConfig) -> bool:
    return config.losses.enable_recon or config.losses.enable_trans


def _to_device(batch: Batch, device: torch.device) -> Batch:
    return {key: value.to(device) if isinstance(value, torch.Tensor) else value for key, value in batch.items()}


def compute_losses(model: SiameseChangeNet, batch: Batch, config: RunConfig) -> LossReport:
    """一次訓練前向傳播並依開關與方向性計算所有損失"""
    run_ttg = _runs_ttg(config)
    outputs = model.forward_train(batch["image_t1"], batch["image_t2"], run_ttg=run_ttg)
    change = batch["change"]
    weights = config.losses
    parts: Dict[str, Optional[torch.Tensor]] = {
        "change": loss_change(outputs.predictions.change_logits, change)
    }

    if config.task == Task.SCD:
        if "sem_t1" not in batch or "sem_t2" not in batch:
            raise DataError("SCD 訓練需要 sem_t1 與 sem_t2 標籤")
        parts["sem"] = loss_sem(
            outputs.predictions.sem_logits_t1,
            outputs.predictions.sem_logits_t2,
            batch["sem_t1"],
            batch["sem_t2"],
            weights.ignore_index,
        )
        parts["sa"] = loss_sa(outputs.refined_t1.r1, outputs.refined_t2.r1, change)

    if run_ttg:
        hat1, hat2 = reconstruct(
            outputs.tokens_t1,
            outputs.tokens_t2,
            outputs.delta_t1,
            outputs.delta_t2,
            config.directionality,
        )
        if weights.enable_recon:
            parts["recon"] = loss_recon_bitemporal(outputs.tokens_t1, outputs.tokens_t2, hat1, hat2, weights.tau)
        if weights.enable_trans:
            labels = token_labels_from_mask(change, outputs.grid)
            parts["trans"] = loss_trans(outputs.delta_t1, outputs.delta_t2, labels)

    return loss_total(parts, weights, config.task)


def _check_finite(report: LossReport, step: int) -> None:
    for name in LOSS_TERMS + ("total",):
        value = getattr(report, name)
        if not torch.isfinite(value).all():
            raise TrainingError(f"第 {step} 步的損失項 {name} 出現非有限值: {float(value.detach())}")


def train_step(state: TrainState, batch: Batch) -> Tuple[TrainState, LossReport]:
    """
    一次前向、損失計算與最佳化更新

    Args:
        state: 訓練狀態（原地更新）
        batch: DataLoader 產生的批次

    Returns:
        tuple: (更新後的狀態, 損失報告)

    Raises:
        TrainingError: 任一損失項非有限值時，指出第一個出問題的項
    """
    state.model.train()
    batch = _to_device(batch, state.device)
    report = compute_losses(state.model, batch, state.config)
    _check_finite(report, state.step + 1)

    state.optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    if state.config.optimizer.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), state.config.optimizer.grad_clip)
    state.optimizer.step()
    state.scheduler.step()
    state.step += 1
    return state, report


# ---------------------------------------------------------------------------
# 評估
# ---------------------------------------------------------------------------


def predict_labels(model: SiameseChangeNet, batch: Batch) -> Dict[str, torch.Tensor]:
    """只走推論路徑，回傳 argmax 標籤圖"""
    predictions = model.forward_inference(batch["image_t1"], batch["image_t2"])
    labels = {"change": predictions.change_logits.argmax(dim=1)}
    if predictions.sem_logits_t1 is not None:
        labels["sem_t1"] = predictions.sem_logits_t1.argmax(dim=1)
        labels["sem_t2"] = predictions.sem_logits_t2.argmax(dim=1)
    return labels


@dataclass
class EvaluationResult:
    report: Dict[str, object]
    samples: List[Tuple[np.ndarray, np.ndarray, float]] = field(default_factory=list)
    class_names: List[str] = field(default_factory=list)

    @property
    def headline(self) -> float:
        """SCD 取 SeK，BCD 取 F1"""
        if "scd" in self.report:
            return float(self.report["scd"]["values"]["SeK"])
        return float(self.report["bcd"]["values"]["F1"])


def evaluate(
    model: SiameseChangeNet,
    loader: Iterable[Batch],
    task: Task,
    class_names: Sequence[str] = (),
    ignore_index: int = 255,
    predict_fn: PredictFn = predict_labels,
    stratify: bool = False,
    device: str = "cpu",
) -> EvaluationResult:
    """
    累積混淆矩陣並計算 BCD 或 SCD 指標

    Args:
        model: 模型（只使用推論路徑）
        loader: 評估資料
        task: BCD 或 SCD
        class_names: 語意類別名稱
        ignore_index: 略過的語意標籤
        predict_fn: 產生標籤圖的函式，除錯時可替換
        stratify: 是否收集每個樣本的結果以產生分層報告

    Returns:
        EvaluationResult: 指標報告與（可選）每個樣本的標籤圖
    """
    model.eval()
    num_classes = len(class_names)
    cm_change = ConfusionMatrix.empty(2)
    cm_sem = ConfusionMatrix.empty(num_classes + 1) if task == Task.SCD else None
    samples: List[Tuple[np.ndarray, np.ndarray, float]] = []
    count = 0

    with torch.no_grad():
        for batch in loader:
            batch = _to_device(batch, torch.device(device))
            labels = predict_fn(model, batch)
            pred_change = labels["change"].cpu().numpy()
            gt_change = batch["change"].cpu().numpy()
            cm_change = cm_change.accumulate(pred_change, gt_change)
            count += pred_change.shape[0]

            if cm_sem is not None:
                pairs = []
                for phase in ("sem_t1", "sem_t2"):
                    pred = scd_label_map(labels[phase].cpu().numpy(), pred_change, ignore_index)
                    gt = scd_label_map(batch[phase].cpu().numpy(), gt_change, ignore_index)
                    cm_sem = cm_sem.accumulate(pred, gt, ignore_index)
                    pairs.append((pred, gt))
            else:
                pairs = [(pred_change, gt_change)]

            if stratify:
                for index in range(pred_change.shape[0]):
                    ratio = float(gt_change[index].mean())
                    pred = np.concatenate([p[index] for p, _ in pairs], axis=0)
                    gt = np.concatenate([g[index] for _, g in pairs], axis=0)
                    samples.append((pred, gt, ratio))

    if count == 0:
        raise DataError("評估資料集為空")

    report: Dict[str, object] = {"task": task.value, "num_samples": count}
    report["bcd"] = bcd_metrics(cm_change).to_dict()
    if cm_sem is not None:
        report["scd"] = scd_metrics(cm_sem).to_dict()
        names = ["no_change"] + list(class_names)
    else:
        names = ["unchanged", "changed"]
    if stratify:
        report["stratified"] = stratified_report(samples, names, ignore_index=ignore_index).to_dict()
    return EvaluationResult(report=report, samples=samples if stratify else [], class_names=names)


# ---------------------------------------------------------------------------
# 資料載入
# ---------------------------------------------------------------------------


def build_datasets(config: RunConfig) -> Tuple[Dataset, Dataset]:
    """依 data 設定建立 (train, test) 資料集"""
    include_semantics = config.task == Task.SCD
    data = config.data
    if data.kind == "synthetic":
        train = SynthDataset(data.synth, data.train_size, 0, include_semantics, data.crop_size)
        test = SynthDataset(data.synth, data.test_size, 1, include_semantics, data.crop_size)
        return train, test
    return (
        ChangeDetectionDataset(data.directory, "train", include_semantics),
        ChangeDetectionDataset(data.directory, "test", include_semantics),
    )


def make_loader(dataset: Dataset, config: RunConfig, shuffle: bool, epoch: int = 0) -> DataLoader:
    # 每個 epoch 的洗牌順序只由 (seed, epoch) 決定，恢復訓練後仍一致
    generator = torch.Generator().manual_seed(config.seed * 100003 + epoch)
    return DataLoader(
        dataset,
        batch_size=config.batch_size,
        shuffle=shuffle,
        generator=generator,
        num_workers=config.num_workers,
    )


# ---------------------------------------------------------------------------
# 檢查點
# ---------------------------------------------------------------------------


def checkpoint_save(state: TrainState, path: str) -> None:
    """
    儲存版本化的檢查點：設定、模型／最佳化器／排程器狀態、進度與亂數狀態
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    ttg = state.model.ttg
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "scheduler": state.scheduler.state_dict(),
        "total_steps": state.total_steps,
        "step": state.step,
        "epoch": state.epoch,
        "best_metric": state.best_metric,
        "best_epoch": state.best_epoch,
        "class_names": list(ttg.class_names) if ttg is not None else None,
        "rng": {
            "torch": torch.get_rng_state(),
            "numpy": np.random.get_state(),
            "python": random.getstate(),
        },
    }
    torch.save(payload, path)
    logger.debug("已儲存檢查點: %s (step %d)", path, state.step)


def _check_state_shapes(expected: Dict[str, torch.Tensor], found: Dict[str, torch.Tensor]) -> None:
    for key, tensor in expected.items():
        if key not in found:
            raise CheckpointError(f"檢查點缺少參數: {key}")
        if tuple(found[key].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"參數 {key} 形狀不符: 檢查點為 {tuple(found[key].shape)}，模型為 {tuple(tensor.shape)}"
            )
    extra = sorted(set(found) - set(expected))
    if extra:
        raise CheckpointError(f"檢查點含有模型沒有的參數: {extra[0]}")


def checkpoint_load(
    path: str,
    config: Optional[RunConfig] = None,
    restore_rng: bool = True,
) -> TrainState:
    """
    讀取檢查點並重建訓練狀態

    Args:
        path: 檢查點路徑
        config: 指定時以此設定建立模型（用來偵測設定不符）；None 時使用檢查點內的設定
        restore_rng: 是否恢復 torch / numpy / python 的亂數狀態

    Returns:
        TrainState: 與儲存時相同的狀態

    Raises:
        CheckpointError: 檔案不存在、版本不符或參數形狀不符
    """
    if not os.path.exists(path):
        raise CheckpointError(f"找不到檢查點: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"檢查點版本不符: 檔案為 {version}，目前支援 {CHECKPOINT_VERSION}")

    if config is None:
        config = RunConfig.from_dict(payload["config"])
    model_state = payload["model"]

    embeddings = None
    if "ttg.t_class" in model_state and payload.get("class_names"):
        matrix = model_state["ttg.t_class"].numpy()
        if matrix.shape[1] == config.ttg.text_dim and matrix.shape[0] == len(config.data.class_names):
            embeddings = ClassEmbeddingSet(matrix, EmbeddingSource.FILE_IMPORT, list(payload["class_names"]))

    steps_per_epoch = max(1, payload["total_steps"] // max(1, config.epochs))
    state = create_train_state(config, steps_per_epoch, embeddings)
    _check_state_shapes(state.model.state_dict(), model_state)
    state.model.load_state_dict(model_state)
    state.optimizer.load_state_dict(payload["optimizer"])
    state.scheduler.load_state_dict(payload["scheduler"])
    state.total_steps = payload["total_steps"]
    state.step = payload["step"]
    state.epoch = payload["epoch"]
    state.best_metric = payload["best_metric"]
    state.best_epoch = payload["best_epoch"]

    if restore_rng:
        rng = payload["rng"]
        torch.set_rng_state(rng["torch"])
        np.random.set_state(rng["numpy"])
        random.setstate(rng["python"])
    logger.info("已載入檢查點: %s (step %d, epoch %d)", path, state.step, state.epoch)
    return state


# ---------------------------------------------------------------------------
# 訓練迴圈
# ---------------------------------------------------------------------------


class TrainingLog:
    """逐行 JSON 的訓練紀錄"""

    def __init__(self, path: Optional[str]):
        self.path = path
        self._file = None
        if path is not None:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            self._file = open(path, "a", encoding="utf-8")

    def write(self, record: Dict[str, object]) -> None:
        if self._file is None:
            return
        self._file.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
        self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self) -> "TrainingLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def fit(
    state: TrainState,
    train_set: Dataset,
    test_set: Optional[Dataset] = None,
    run_dir: Optional[str] = None,
    progress: bool = True,
) -> List[Dict[str, object]]:
    """
    執行完整的訓練迴圈

    每個 epoch 結束寫出 checkpoints/last.pt；每 eval_every 個 epoch 評估一次，
    主指標（SeK 或 F1）進步時寫出 checkpoints/best.pt。

    Returns:
        list: 每次評估的紀錄
    """
    config = state.config
    log_path = os.path.join(run_dir, "train_log.jsonl") if run_dir else None
    evaluations: List[Dict[str, object]] = []

    with TrainingLog(log_path) as log:
        for epoch in range(state.epoch, config.epochs):
            loader = make_loader(train_set, config, shuffle=True, epoch=epoch)
            bar = tqdm(loader, desc=f"epoch {epoch + 1}/{config.epochs}", disable=not progress, leave=False)
            for batch in bar:
                lr = state.lr
                state, report = train_step(state, batch)
                values = report.as_dict()
                log.write({"step": state.step, "epoch": epoch, "lr": lr, **values})
                bar.set_postfix(total=f"{values['total']:.4f}")
            state.epoch = epoch + 1

            if test_set is not None and len(test_set) > 0 and state.epoch % config.eval_every == 0:
                result = evaluate(
                    state.model,
                    make_loader(test_set, config, shuffle=False),
                    config.task,
                    config.data.class_names,
                    config.losses.ignore_index,
                    device=config.device,
                )
                record = {"event": "eval", "epoch": state.epoch, "step": state.step, **result.report}
                log.write(record)
                evaluations.append(record)
                logger.info("epoch %d 評估: 主指標 %.2f", state.epoch, result.headline)
                if state.best_metric is None or result.headline > state.best_metric:
                    state.best_metric = result.headline
                    state.best_epoch = state.epoch
                    if run_dir:
                        checkpoint_save(state, os.path.join(run_dir, "checkpoints", "best.pt"))
            if run_dir:
                checkpoint_save(state, os.path.join(run_dir, "checkpoints", "last.pt"))
    return evaluations


def train_and_evaluate(
    config: RunConfig,
    run_dir: Optional[str] = None,
    progress: bool = True,
    stratify: bool = False,
) -> Tuple[TrainState, EvaluationResult]:
    """建立資料與狀態、訓練完畢後在測試集上評估一次"""
    train_set, test_set = build_datasets(config)
    if len(train_set) == 0:
        raise DataError("訓練資料集為空")
    steps_per_epoch = -(-len(train_set) // config.batch_size)
    state = create_train_state(config, steps_per_epoch)
    fit(state, train_set, None, run_dir, progress)
    result = evaluate(
        state.model,
        make_loader(test_set, config, shuffle=False),
        config.task,
        config.data.class_names,
        config.losses.ignore_index,
        stratify=stratify,
        device=config.device,
    )
    return state, result


# ---------------------------------------------------------------------------
# 消融矩陣
# ---------------------------------------------------------------------------


def _arm(base: RunConfig, **changes) -> RunConfig:
    config = copy.deepcopy(base)
    for key, value in changes.items():
        section, name = key.split("__")
        setattr(getattr(config, section), name, value)
    return config


def ablation_arms(base: RunConfig, axes: Sequence[str]) -> List[Tuple[str, str, RunConfig]]:
    """
    展開消融軸成 (軸, 名稱, 設定) 列表

    - loss_terms：L_cd / L_cd + L_recon / L_cd + L_recon + L_trans
    - asi：without ASI / with ASI
    - directionality：baseline（無輔助損失）/ one_way_eq1 / one_way_eq2 / two_way
    """
    unknown = [axis for axis in axes if axis not in ABLATION_AXES]
    if unknown:
        raise ValueError(f"未知的消融軸: {unknown[0]}（可用: {', '.join(ABLATION_AXES)}）")
    if not axes:
        return [("baseline", "baseline", copy.deepcopy(base))]

    arms: List[Tuple[str, str, RunConfig]] = []
    for axis in ABLATION_AXES:
        if axis not in axes:
            continue
        if axis == "loss_terms":
            arms += [
                (axis, "L_cd", _arm(base, losses__enable_recon=False, losses__enable_trans=False)),
                (axis, "L_cd + L_recon", _arm(base, losses__enable_recon=True, losses__enable_trans=False)),
                (
                    axis,
                    "L_cd + L_recon + L_trans",
                    _arm(base, losses__enable_recon=True, losses__enable_trans=True),
                ),
            ]
        elif axis == "asi":
            arms += [
                (axis, "w/o ASI", _arm(base, ttg__asi_enabled=False)),
                (axis, "w/ ASI", _arm(base, ttg__asi_enabled=True)),
            ]
        else:
            arms.append(
                (axis, "baseline", _arm(base, losses__enable_recon=False, losses__enable_trans=False))
            )
            for direction in Directionality:
                arms.append((axis, direction.value, _arm(base, ttg__directionality=direction)))
    return arms


@dataclass
class AblationRow:
    axis: str
    arm: str
    metric: str
    per_seed: List[float]
    ttg_params: int
    reports: List[Dict[str, object]] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    def to_dict(self) -> Dict[str, object]:
        return {
            "axis": self.axis,
            "arm": self.arm,
            "metric": self.metric,
            "mean": self.mean,
            "per_seed": list(self.per_seed),
            "ttg_params": self.ttg_params,
            "reports": self.reports,
        }


def run_ablation_matrix(
    base: RunConfig,
    axes: Sequence[str],
    seeds: Optional[Sequence[int]] = None,
    run_dir: Optional[str] = None,
    progress: bool = False,
) -> List[AblationRow]:
    """
    每個消融組合從相同的 seed 訓練並在測試集上評估

    Args:
        base: 基準設定
        axes: loss_terms / asi / directionality 的子集合
        seeds: 要平均的種子；None 時只用 base.seed
        run_dir: 指定時每個組合寫到 <run_dir>/<軸>/<組合>/seed_<s>
        progress: 是否顯示進度條

    Returns:
        list: 依表格順序排列的 AblationRow
    """
    seeds = list(seeds) if seeds else [base.seed]
    metric = "SeK" if base.task == Task.SCD else "F1"
    rows: List[AblationRow] = []
    for axis, name, arm_config in ablation_arms(base, axes):
        scores, reports, ttg_params = [], [], 0
        for seed in seeds:
            config = copy.deepcopy(arm_config)
            config.seed = seed
            arm_dir = None
            if run_dir:
                slug = name.replace(" ", "").replace("+", "_").replace("/", "")
                arm_dir = os.path.join(run_dir, axis, slug, f"seed_{seed}")
            state, result = train_and_evaluate(config, arm_dir, progress)
            scores.append(result.headline)
            reports.append(result.report)
            ttg_params = state.model.param_count("ttg")
        row = AblationRow(axis, name, metric, scores, ttg_params, reports)
        logger.info("消融 %s / %s: %s = %.2f", axis, name, metric, row.mean)
        rows.append(row)
    return rows


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    table = [
        {
            "axis": row.axis,
            "arm": row.arm,
            row.metric: row.mean,
            "seeds": ",".join(f"{value:.2f}" for value in row.per_seed),
            "ttg_params": row.ttg_params,
        }
        for row in rows
    ]
    metric = rows[0].metric if rows else "metric"
    return format_table(table, ["axis", "arm", metric, "seeds", "ttg_params"])
