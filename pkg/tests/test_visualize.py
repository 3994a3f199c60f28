"""
測試模組 - 差分特徵圖與重建相似度圖
"""

import os
import shutil
import tempfile
from dataclasses import replace

import numpy as np
import pytest
import torch
from matplotlib import colormaps
from PIL import Image

from src.config import Directionality
from src.data import synth_pair
from src.errors import ConfigError
from src.model import build_model
from src.visualize import (
    diff_feature_map,
    recon_similarity_map,
    render_heatmap,
    save_visualization,
    true_difference,
)


def _viridis(value):
    return tuple(int(c) for c in colormaps["viridis"](value, bytes=True)[:3])


@pytest.fixture
def model(scd_config):
    torch.manual_seed(0)
    return build_model(scd_config)


@pytest.fixture
def sample(scd_config):
    return synth_pair(scd_config.data.synth, "vis")


@pytest.fixture
def out_dir():
    directory = tempfile.mkdtemp()
    yield directory
    shutil.rmtree(directory, ignore_errors=True)


class TestHeatmap:
    """
    固定色階
    """

    def test_scale_is_pinned(self):
        """超出色階的數值截斷到端點顏色"""
        image = render_heatmap(np.array([[-5.0, 0.0, 1.0, 9.0]]), (0.0, 1.0))
        pixels = np.asarray(image)
        assert tuple(pixels[0, 0]) == _viridis(0.0) == tuple(pixels[0, 1])
        assert tuple(pixels[0, 3]) == _viridis(1.0) == tuple(pixels[0, 2])

    def test_upscale(self):
        image = render_heatmap(np.zeros((2, 2)), (0.0, 1.0), upscale=4)
        assert image.size == (8, 8)


class TestMaps:
    """
    差分與重建相似度
    """

    def test_identical_pair_renders_floor_colour(self, model, sample, out_dir):
        """x1 == x2 時差分圖全為色階最低點的顏色"""
        same = replace(sample, image_t2=sample.image_t1.copy())
        x = torch.from_numpy(same.image_t1)
        assert float(np.abs(diff_feature_map(model, x, x.clone())).max()) == 0.0

        (path,) = save_visualization(model, same, "diff_features", out_dir)
        pixels = np.asarray(Image.open(path).convert("RGB")).reshape(-1, 3)
        assert {tuple(p) for p in pixels.tolist()} == {_viridis(0.0)}
        assert Image.open(path).size == (64, 64)

    def test_true_difference_saturates(self, model, sample, out_dir):
        """以真實差值當 Δ 時相似度為 1，圖為色階最高點的顏色"""
        x1, x2 = torch.from_numpy(sample.image_t1), torch.from_numpy(sample.image_t2)
        maps = recon_similarity_map(model, x1, x2, Directionality.TWO_WAY, true_difference)
        assert set(maps) == {"t1", "t2"}
        for values in maps.values():
            np.testing.assert_allclose(values, 1.0, atol=1e-5)

        paths = save_visualization(
            model, sample, "recon_similarity", out_dir, Directionality.TWO_WAY, true_difference
        )
        assert sorted(os.path.basename(p) for p in paths) == ["vis_recon_t1.png", "vis_recon_t2.png"]
        for path in paths:
            pixels = np.asarray(Image.open(path).convert("RGB")).reshape(-1, 3)
            assert {tuple(p) for p in pixels.tolist()} == {_viridis(1.0)}

    def test_one_way_produces_single_map(self, model, sample):
        x1, x2 = torch.from_numpy(sample.image_t1), torch.from_numpy(sample.image_t2)
        maps = recon_similarity_map(model, x1, x2, Directionality.ONE_WAY_EQ1)
        assert set(maps) == {"t2"}
        assert maps["t2"].shape == (2, 2)

    def test_output_is_byte_identical(self, model, sample, out_dir):
        first = save_visualization(model, sample, "diff_features", os.path.join(out_dir, "a"))
        second = save_visualization(model, sample, "diff_features", os.path.join(out_dir, "b"))
        with open(first[0], "rb") as f1, open(second[0], "rb") as f2:
            assert f1.read() == f2.read()

    def test_unknown_kind(self, model, sample, out_dir):
        with pytest.raises(ConfigError, match="視覺化種類"):
            save_visualization(model, sample, "attention", out_dir)

    def test_recon_requires_ttg(self, scd_config, sample):
        bare = build_model(scd_config, with_ttg=False)
        x = torch.from_numpy(sample.image_t1)
        with pytest.raises(ConfigError, match="TTG"):
            recon_similarity_map(bare, x, x)
