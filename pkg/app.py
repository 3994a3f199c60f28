"""
應用程式主模組 - 命令列介面：train / eval / ablate / visualize / synth / embed
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from src.config import (
    DatasetSpec,
    Layout,
    RunConfig,
    SynthSpec,
    Task,
    load_run_config,
    load_synth_spec,
    save_run_config,
)
from src.data import ChangeDetectionDataset, SynthDataset, load_sample, write_synthetic_dataset
from src.embedding_provider import (
    EmbeddingSource,
    SeededEmbeddingProvider,
    SentenceTransformerEmbeddingProvider,
    embed_class_names,
    export_embedding_file,
)
from src.errors import CheckpointError, ConfigError, DataError, ShapeError, TrainingError
from src.metrics import write_report
from src.trainer import (
    ABLATION_AXES,
    build_datasets,
    checkpoint_load,
    create_train_state,
    evaluate,
    fit,
    format_ablation_table,
    make_loader,
    run_ablation_matrix,
)
from src.visualize import VISUALIZATIONS, save_visualization

logger = logging.getLogger("tgcd")

EXIT_OK = 0
EXIT_TRAINING = 1
EXIT_USAGE = 2


class ChangeDetectionApp:
    """
    每個命令對應一個方法，回傳該次執行的結果摘要
    """

    def __init__(self, config: RunConfig, run_dir: Optional[str] = None, progress: bool = True):
        self.config = config
        self.run_dir = run_dir
        self.progress = progress

    def _prepare_run_dir(self, command: str) -> str:
        run_dir = self.run_dir or os.path.join(self.config.run_dir, f"{command}_seed{self.config.seed}")
        os.makedirs(run_dir, exist_ok=True)
        save_run_config(self.config, os.path.join(run_dir, "config.json"))
        return run_dir

    def _write_manifest(self, run_dir: str, command: str, artifacts: List[str], extra: Optional[Dict] = None) -> str:
        manifest = {
            "command": command,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "artifacts": sorted(os.path.relpath(path, run_dir) for path in artifacts),
        }
        if extra:
            manifest.update(extra)
        path = os.path.join(run_dir, "manifest.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, ensure_ascii=False, sort_keys=True)
        return path

    def train(self) -> Dict[str, Any]:
        """訓練並在測試集上評估最後的模型"""
        config = self.config
        run_dir = self._prepare_run_dir("train")
        train_set, test_set = build_datasets(config)
        if len(train_set) == 0:
            raise DataError("訓練資料集為空")
        steps_per_epoch = -(-len(train_set) // config.batch_size)
        state = create_train_state(config, steps_per_epoch)
        fit(state, train_set, test_set, run_dir, self.progress)

        artifacts = [
            os.path.join(run_dir, "config.json"),
            os.path.join(run_dir, "train_log.jsonl"),
            os.path.join(run_dir, "checkpoints", "last.pt"),
        ]
        if os.path.exists(os.path.join(run_dir, "checkpoints", "best.pt")):
            artifacts.append(os.path.join(run_dir, "checkpoints", "best.pt"))
        report = None
        if len(test_set) > 0:
            result = evaluate(
                state.model,
                make_loader(test_set, config, shuffle=False),
                config.task,
                config.data.class_names,
                config.losses.ignore_index,
                device=config.device,
            )
            report = result.report
            artifacts += list(write_report(report, run_dir))
        self._write_manifest(run_dir, "train", artifacts, {"steps": state.step})
        return {"status": "success", "run_dir": run_dir, "steps": state.step, "report": report}

    def evaluate(
        self,
        checkpoint: str,
        data_root: Optional[str] = None,
        layout: Optional[str] = None,
        split: str = "test",
        task: Optional[str] = None,
        stratify: bool = False,
    ) -> Dict[str, Any]:
        """以檢查點評估指定資料集（未指定時使用檢查點設定的測試集）"""
        state = checkpoint_load(checkpoint, restore_rng=False)
        config = state.config
        if task is not None and Task(task.upper()) != config.task:
            raise ConfigError(f"--task {task} 與檢查點的任務 {config.task.value} 不符")

        include_semantics = config.task == Task.SCD
        if data_root is not None:
            spec = DatasetSpec(
                root=data_root,
                layout=Layout(layout) if layout else Layout(config.task.value.lower()),
                class_names=list(config.data.class_names),
                ignore_index=config.losses.ignore_index,
                # 評估整張影像，不沿用訓練時的裁切
                patch_size=None,
            )
            if config.task == Task.SCD and spec.layout != Layout.SCD:
                raise ConfigError("SCD 檢查點需要 scd 佈局的資料集")
            dataset = ChangeDetectionDataset(spec, split, include_semantics)
        else:
            _, dataset = build_datasets(config)

        self.config = config
        run_dir = self._prepare_run_dir("eval")
        result = evaluate(
            state.model,
            make_loader(dataset, config, shuffle=False),
            config.task,
            config.data.class_names,
            config.losses.ignore_index,
            stratify=stratify,
            device=config.device,
        )
        artifacts = list(write_report(result.report, run_dir))
        self._write_manifest(run_dir, "eval", artifacts, {"checkpoint": os.path.abspath(checkpoint)})
        return {"status": "success", "run_dir": run_dir, "report": result.report}

    def ablate(self, axes: Sequence[str], seeds: Optional[Sequence[int]] = None) -> Dict[str, Any]:
        run_dir = self._prepare_run_dir("ablate")
        rows = run_ablation_matrix(self.config, axes, seeds, run_dir, self.progress)
        table = format_ablation_table(rows)
        json_path = os.path.join(run_dir, "ablation.json")
        txt_path = os.path.join(run_dir, "ablation.txt")
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump([row.to_dict() for row in rows], f, indent=2, ensure_ascii=False)
        with open(txt_path, "w", encoding="utf-8") as f:
            f.write(table + "\n")
        self._write_manifest(run_dir, "ablate", [json_path, txt_path], {"axes": list(axes)})
        return {"status": "success", "run_dir": run_dir, "rows": rows, "table": table}

    def visualize(self, checkpoint: str, sample: str, what: str, data_root: Optional[str] = None) -> Dict[str, Any]:
        if what not in VISUALIZATIONS:
            raise ConfigError(f"未知的視覺化種類: {what}（可用: {', '.join(VISUALIZATIONS)}）")
        state = checkpoint_load(checkpoint, restore_rng=False)
        config = state.config
        if data_root is not None:
            spec = DatasetSpec(
                root=data_root,
                layout=Layout(config.task.value.lower()),
                class_names=list(config.data.class_names),
            )
            bitemporal = load_sample(spec, sample)
        else:
            if config.data.kind != "synthetic":
                raise ConfigError("directory 資料集需要以 --data-root 指定樣本位置")
            try:
                index = int(sample)
            except ValueError:
                raise DataError(f"合成資料的樣本必須是測試集索引，收到 {sample!r}") from None
            dataset = SynthDataset(config.data.synth, config.data.test_size, 1, True, config.data.crop_size)
            if not 0 <= index < len(dataset):
                raise DataError(f"樣本索引 {index} 超出測試集大小 {len(dataset)}")
            bitemporal = dataset.sample(index)

        self.config = config
        run_dir = self._prepare_run_dir("visualize")
        paths = save_visualization(state.model, bitemporal, what, run_dir, config.directionality)
        self._write_manifest(run_dir, "visualize", paths, {"what": what, "sample": sample})
        return {"status": "success", "run_dir": run_dir, "files": paths}

    def synth(self, out_dir: str, n: int, layout: str = "scd", spec: Optional[SynthSpec] = None) -> Dict[str, Any]:
        """寫出合成資料集；不會覆寫既有的非空目錄"""
        if os.path.isdir(out_dir) and os.listdir(out_dir):
            raise DataError(f"輸出目錄已存在且非空: {out_dir}")
        spec = spec or self.config.data.synth
        manifest = write_synthetic_dataset(spec, out_dir, n, self.config.data.class_names, Layout(layout))
        return {"status": "success", "out_dir": out_dir, "manifest": manifest}

    def embed(self, out_path: str, backend: str = "seeded", model_name: str = "all-MiniLM-L6-v2") -> Dict[str, Any]:
        """預先計算類別文字嵌入並寫成 .npz 或文字檔"""
        ttg = self.config.ttg
        if backend == "seeded":
            provider = SeededEmbeddingProvider(dim=ttg.text_dim, seed=ttg.embedding_seed)
            source = EmbeddingSource.SEEDED_SYNTHETIC
        elif backend == "sentence-transformer":
            provider = SentenceTransformerEmbeddingProvider(model_name)
            source = EmbeddingSource.SENTENCE_TRANSFORMER
        else:
            raise ConfigError(f"未知的嵌入後端: {backend}")
        embedding_set = embed_class_names(provider, self.config.data.class_names, source, ttg.prompt_template)
        export_embedding_file(embedding_set, out_path)
        return {
            "status": "success",
            "path": out_path,
            "shape": [embedding_set.num_classes, embedding_set.dim],
        }


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tgcd", description="文字引導的時空語意一致性變化偵測")
    parser.add_argument("--config", help="JSON 設定檔")
    parser.add_argument("--seed", type=int, help="覆寫 seed")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="覆寫設定欄位，例如 losses.lambda1=0")
    parser.add_argument("--run-dir", help="輸出目錄（預設為 $TGCD_RUN_DIR/<命令>_seed<seed>）")
    parser.add_argument("--no-progress", action="store_true", help="不顯示進度條")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", help="訓練模型")

    p_eval = sub.add_parser("eval", help="評估檢查點")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data-root", help="目錄式資料集根目錄")
    p_eval.add_argument("--layout", choices=[layout.value for layout in Layout])
    p_eval.add_argument("--split", default="test")
    p_eval.add_argument("--task", choices=["bcd", "scd", "BCD", "SCD"])
    p_eval.add_argument("--stratify", action="store_true", help="加上依變化比例分層的報告")

    p_ablate = sub.add_parser("ablate", help="執行消融矩陣")
    p_ablate.add_argument("--axes", nargs="*", default=[], choices=list(ABLATION_AXES))
    p_ablate.add_argument("--seeds", nargs="*", type=int)

    p_vis = sub.add_parser("visualize", help="輸出差分特徵或重建相似度圖")
    p_vis.add_argument("--checkpoint", required=True)
    p_vis.add_argument("--sample", required=True, help="樣本識別碼（合成資料為測試集索引）")
    p_vis.add_argument("--what", required=True, help=f"{' / '.join(VISUALIZATIONS)}")
    p_vis.add_argument("--data-root")

    p_synth = sub.add_parser("synth", help="產生合成資料集")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--n", type=int, default=10)
    p_synth.add_argument("--layout", choices=[layout.value for layout in Layout], default="scd")
    p_synth.add_argument("--spec", help="SynthSpec JSON 檔（預設使用設定中的 data.synth）")

    p_embed = sub.add_parser("embed", help="預先計算類別文字嵌入")
    p_embed.add_argument("--out", required=True, help=".npz 或 .txt 路徑")
    p_embed.add_argument("--backend", choices=["seeded", "sentence-transformer"], default="seeded")
    p_embed.add_argument("--model", default="all-MiniLM-L6-v2")
    return parser


def run(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    config = load_run_config(args.config, overrides)
    app = ChangeDetectionApp(config, args.run_dir, progress=not args.no_progress)

    if args.command == "train":
        return app.train()
    if args.command == "eval":
        return app.evaluate(args.checkpoint, args.data_root, args.layout, args.split, args.task, args.stratify)
    if args.command == "ablate":
        return app.ablate(args.axes, args.seeds)
    if args.command == "visualize":
        return app.visualize(args.checkpoint, args.sample, args.what, args.data_root)
    if args.command == "synth":
        spec = load_synth_spec(args.spec) if args.spec else None
        if args.seed is not None:
            spec = replace(spec or config.data.synth, seed=args.seed)
        return app.synth(args.out, args.n, args.layout, spec)
    return app.embed(args.out, args.backend, args.model)


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("TGCD_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = create_parser().parse_args(argv)
    try:
        result = run(args)
    except (ConfigError, DataError, CheckpointError, ShapeError) as e:
        logger.error("%s", e)
        print(f"錯誤: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as e:
        logger.error("訓練中止: %s", e)
        print(f"訓練中止: {e}", file=sys.stderr)
        return EXIT_TRAINING

    if args.command == "ablate":
        print(result["table"])
    elif args.command == "eval":
        print(json.dumps(result["report"], indent=2, ensure_ascii=False))
    else:
        summary = {key: value for key, value in result.items() if key not in ("report", "manifest")}
        print(json.dumps(summary, indent=2, ensure_ascii=False, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
