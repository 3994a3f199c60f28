"""
變化偵測 API 示例
"""

import os
import shutil
import tempfile

import torch
from dotenv import load_dotenv

from src.config import RunConfig, Task, TTGConfig
from src.consistency import reconstruct
from src.data import SynthDataset, synth_pair
from src.embedding_provider import text_provider_load
from src.model import build_model
from src.trainer import (
    checkpoint_load,
    checkpoint_save,
    create_train_state,
    evaluate,
    make_loader,
    train_step,
)
from src.visualize import save_visualization

# 載入環境變數
load_dotenv()


def main():
    """
    示範如何產生資料、訓練幾步、評估並輸出視覺化
    """
    config = RunConfig()
    config.ttg = TTGConfig(fusion_dim=64, decoder_layers=2)
    config.data.train_size = 8
    config.data.test_size = 4
    config.batch_size = 4
    config.epochs = 1
    config.validate()

    work_dir = tempfile.mkdtemp(prefix="tgcd_example_")
    try:
        print("步驟 1: 類別文字嵌入與模型")
        embeddings = text_provider_load(
            os.getenv("TGCD_EMBEDDING_FILE") or None,
            config.data.class_names,
            config.ttg.embedding_seed,
            config.ttg.text_dim,
        )
        print(f"嵌入來源: {embeddings.source.value}, 形狀: {embeddings.embeddings.shape}")
        model = build_model(config, embeddings)
        print(
            f"參數數量 full={model.param_count('full')}, "
            f"inference={model.param_count('inference')}, ttg={model.param_count('ttg')}"
        )

        print("\n步驟 2: 合成一組雙時相樣本")
        sample = synth_pair(config.data.synth, "demo")
        print(f"畫布 {sample.size}, 變化比例 {sample.change_ratio:.3f}")

        x1 = torch.from_numpy(sample.image_t1).unsqueeze(0)
        x2 = torch.from_numpy(sample.image_t2).unsqueeze(0)
        outputs = model.forward_train(x1, x2)
        hat1, hat2 = reconstruct(
            outputs.tokens_t1, outputs.tokens_t2, outputs.delta_t1, outputs.delta_t2, config.directionality
        )
        print(f"stage-4 tokens {tuple(outputs.tokens_t1.shape)}, 網格 {outputs.grid}")
        print(f"重建方向: {config.directionality.value}, Î_1={hat1 is not None}, Î_2={hat2 is not None}")

        print("\n步驟 3: 訓練幾步")
        train_set = SynthDataset(config.data.synth, config.data.train_size, 0)
        test_set = SynthDataset(config.data.synth, config.data.test_size, 1)
        steps_per_epoch = len(train_set) // config.batch_size
        state = create_train_state(config, steps_per_epoch, class_embeddings=embeddings)
        for batch in make_loader(train_set, config, shuffle=True):
            state, report = train_step(state, batch)
            values = report.as_dict()
            print(
                f"step {state.step}: total={values['total']:.4f} "
                f"change={values['l_change']:.4f} recon={values['l_recon']:.4f} trans={values['l_trans']:.4f}"
            )

        print("\n步驟 4: 評估（只走推論路徑）")
        result = evaluate(state.model, make_loader(test_set, config, shuffle=False), Task.SCD, config.data.class_names)
        for name, value in result.report["scd"]["values"].items():
            print(f"  {name}: {value:.2f}")

        print("\n步驟 5: 檢查點與視覺化")
        path = os.path.join(work_dir, "checkpoints", "last.pt")
        checkpoint_save(state, path)
        restored = checkpoint_load(path)
        print(f"已還原 step {restored.step}")
        files = save_visualization(restored.model, test_set.sample(0), "diff_features", work_dir)
        files += save_visualization(
            restored.model, test_set.sample(0), "recon_similarity", work_dir, config.directionality
        )
        for file in files:
            print(f"  {file}")

    finally:
        shutil.rmtree(work_dir, ignore_errors=True)
        print(f"\n已刪除暫存目錄: {work_dir}")


if __name__ == "__main__":
    main()
