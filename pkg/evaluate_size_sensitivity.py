#!/usr/bin/env python3
"""
變化尺度敏感度評估腳本 - 比較 L_cd 與完整目標在不同 patch 大小與變化比例分層下的差異
"""

import argparse
import copy
import json
import logging
import os

from dotenv import load_dotenv

from src.config import RunConfig, load_run_config
from src.metrics import StratumReport, format_table, stratified_report
from src.trainer import train_and_evaluate

logger = logging.getLogger("tgcd.size_sensitivity")


def arm_configs(base: RunConfig):
    """(名稱, 設定)：只用 L_cd 的基準與完整目標"""
    baseline = copy.deepcopy(base)
    baseline.losses.enable_recon = False
    baseline.losses.enable_trans = False
    full = copy.deepcopy(base)
    full.losses.enable_recon = True
    full.losses.enable_trans = True
    return [("L_cd", baseline), ("full", full)]


def patch_configs(base: RunConfig, canvas: int, crop: int):
    """完整畫布與裁切後兩種 patch 大小"""
    configs = []
    for size, crop_size in ((canvas, None), (crop, crop)):
        config = copy.deepcopy(base)
        config.data.synth.canvas = [canvas, canvas]
        config.data.crop_size = crop_size
        configs.append((size, config))
    return configs


def print_stratified(report: StratumReport) -> None:
    for name, entry in report.strata.items():
        rows = [
            {"class": key, "OA": value, "delta": entry.deltas.get(key)}
            for key, value in entry.per_class_oa.items()
        ]
        print(f"\n   [{name}] n={entry.count}")
        print("   " + format_table(rows, ["class", "OA", "delta"]).replace("\n", "\n   "))
    for note in report.notes:
        print(f"   註: {note}")


def main():
    load_dotenv()
    logging.basicConfig(level=os.getenv("TGCD_LOG_LEVEL", "INFO").upper())
    parser = argparse.ArgumentParser(description="變化尺度敏感度評估")
    parser.add_argument("--config", help="基準設定檔（預設為內建預設值）")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--canvas", type=int, default=128)
    parser.add_argument("--crop", type=int, default=64)
    parser.add_argument("--ratio-range", type=float, nargs=2, default=[0.01, 0.5])
    parser.add_argument("--out", help="把結果寫成 JSON")
    args = parser.parse_args()

    base = load_run_config(args.config, args.overrides)
    base.data.kind = "synthetic"
    base.data.synth.change_ratio_range = list(args.ratio_range)
    base.validate()

    print("=== 變化尺度敏感度評估 ===\n")
    print(f"任務: {base.task.value}, epochs: {base.epochs}, 變化比例範圍: {args.ratio_range}")

    summary = {"patch_sizes": {}, "stratified": None}
    stratified_inputs = {}
    print("\n1. 不同 patch 大小的主指標:")
    for size, patch_config in patch_configs(base, args.canvas, args.crop):
        scores = {}
        for name, config in arm_configs(patch_config):
            _, result = train_and_evaluate(config, progress=False, stratify=True)
            scores[name] = result.headline
            if size == args.canvas:
                stratified_inputs[name] = result
        gain = scores["full"] - scores["L_cd"]
        summary["patch_sizes"][size] = {**scores, "gain": gain}
        print(f"   - {size}x{size}: L_cd {scores['L_cd']:.2f} → full {scores['full']:.2f}（差 {gain:+.2f}）")

    print("\n2. 依變化比例分層的 per-class OA（full - L_cd）:")
    full, baseline = stratified_inputs["full"], stratified_inputs["L_cd"]
    report = stratified_report(full.samples, full.class_names, baseline=baseline.samples)
    print_stratified(report)
    summary["stratified"] = report.to_dict()

    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, ensure_ascii=False)
        print(f"\n結果已寫入: {args.out}")


if __name__ == "__main__":
    main()
