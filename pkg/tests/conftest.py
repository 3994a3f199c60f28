"""
共用測試設定 - 極小的模型與合成資料，讓 CPU 上的測試在數秒內完成
"""

import os

import pytest
import torch

from src.config import (
    DataConfig,
    LossWeights,
    ModelConfig,
    OptimizerConfig,
    RunConfig,
    SynthSpec,
    Task,
    TTGConfig,
)

CLASS_NAMES = ["ground", "tree", "water", "building"]

slow = pytest.mark.skipif(os.getenv("TGCD_RUN_SLOW") != "1", reason="需要 TGCD_RUN_SLOW=1")


def tiny_config(task: Task = Task.SCD, **overrides) -> RunConfig:
    config = RunConfig(
        model=ModelConfig(
            stage_channels=[8, 16, 32, 64],
            num_classes=len(CLASS_NAMES),
            task=task,
            decoder_dim=16,
            blocks_per_stage=1,
            attention_heads=1,
        ),
        ttg=TTGConfig(
            num_experts=3,
            fusion_dim=16,
            decoder_layers=1,
            attention_heads=2,
            text_dim=32,
            embedding_file=None,
        ),
        losses=LossWeights(),
        optimizer=OptimizerConfig(lr=1e-3),
        data=DataConfig(
            class_names=list(CLASS_NAMES),
            synth=SynthSpec(canvas=[64, 64], num_classes=len(CLASS_NAMES), num_regions=5),
            train_size=8,
            test_size=4,
        ),
        batch_size=4,
        epochs=1,
        seed=0,
        num_workers=0,
        device="cpu",
    )
    for key, value in overrides.items():
        setattr(config, key, value)
    config.validate()
    return config


@pytest.fixture
def scd_config() -> RunConfig:
    return tiny_config(Task.SCD)


@pytest.fixture
def bcd_config() -> RunConfig:
    return tiny_config(Task.BCD)


@pytest.fixture
def image_pair():
    generator = torch.Generator().manual_seed(0)
    x1 = torch.rand(2, 3, 64, 64, generator=generator)
    x2 = torch.rand(2, 3, 64, 64, generator=generator)
    return x1, x2
