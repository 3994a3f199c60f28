"""
測試模組 - 孿生編碼器、解碼器與參數計數
"""

import copy

import pytest
import torch

from conftest import tiny_config
from src.config import Task
from src.errors import ConfigError, ShapeError
from src.model import Phase, build_model


def _model(config, with_ttg=True):
    torch.manual_seed(config.seed)
    model = build_model(config, with_ttg=with_ttg)
    model.eval()
    return model


class TestShapes:
    """
    形狀契約
    """

    def test_pyramid_strides(self, scd_config, image_pair):
        """四層特徵的空間尺寸為 H/4、H/8、H/16、H/32"""
        model = _model(scd_config)
        pyramid = model.encode(image_pair[0])
        sizes = [tuple(stage.shape[-2:]) for stage in pyramid.stages]
        assert sizes == [(16, 16), (8, 8), (4, 4), (2, 2)]
        assert [stage.shape[1] for stage in pyramid.stages] == [8, 16, 32, 64]
        assert pyramid.stage4_tokens().shape == (2, 4, 64)

    def test_random_sizes(self, scd_config):
        """隨機 (H, W)（32 的倍數）下各層步距為 4/8/16/32，輸出與輸入同尺寸"""
        model = _model(scd_config)
        generator = torch.Generator().manual_seed(11)
        for _ in range(5):
            height, width = (int(v) * 32 for v in torch.randint(1, 4, (2,), generator=generator))
            x = torch.rand(1, 3, height, width, generator=generator)
            with torch.no_grad():
                pyramid = model.encode(x)
                predictions = model(x, x.clone())
            sizes = [tuple(stage.shape[-2:]) for stage in pyramid.stages]
            assert sizes == [(height // s, width // s) for s in (4, 8, 16, 32)]
            assert predictions.change_logits.shape == (1, 2, height, width)
            assert predictions.sem_logits_t1.shape == (1, 4, height, width)

    def test_eval_passes_are_bit_identical(self, scd_config, image_pair):
        """eval 模式下兩次編碼結果逐位元相同"""
        model = _model(scd_config)
        with torch.no_grad():
            first = model.encode(image_pair[0])
            second = model.encode(image_pair[0])
        for a, b in zip(first.stages, second.stages):
            assert torch.equal(a, b)

    def test_scd_predictions(self, scd_config, image_pair):
        model = _model(scd_config)
        with torch.no_grad():
            predictions = model(*image_pair)
        assert predictions.change_logits.shape == (2, 2, 64, 64)
        assert predictions.sem_logits_t1.shape == (2, 4, 64, 64)
        assert predictions.sem_logits_t2.shape == (2, 4, 64, 64)

    def test_bcd_has_no_semantic_head(self, bcd_config, image_pair):
        model = _model(bcd_config)
        with torch.no_grad():
            predictions = model(*image_pair)
        assert predictions.sem_logits_t1 is None
        assert predictions.change_logits.shape == (2, 2, 64, 64)

    def test_non_divisible_input(self, scd_config):
        """輸入尺寸必須能被 32 整除"""
        model = _model(scd_config)
        with pytest.raises(ConfigError, match="32"):
            model.encode(torch.rand(1, 3, 48, 64))

    def test_wrong_channel_count(self, scd_config):
        model = _model(scd_config)
        with pytest.raises(ConfigError, match="in_channels"):
            model.encode(torch.rand(1, 4, 64, 64))

    def test_mismatched_pair(self, scd_config):
        model = _model(scd_config)
        with pytest.raises(ShapeError):
            model(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 32, 64))


class TestSiamese:
    """
    權重共享與差分性質
    """

    def test_phase_does_not_change_features(self, scd_config, image_pair):
        """兩個時相標記使用相同權重"""
        model = _model(scd_config)
        with torch.no_grad():
            a = model.encode(image_pair[0], Phase.T1)
            b = model.encode(image_pair[0], Phase.T2)
        for s1, s2 in zip(a.stages, b.stages):
            assert torch.equal(s1, s2)

    def test_identical_inputs_give_zero_differences(self, scd_config, image_pair):
        """x1 == x2 時所有差分特徵皆為 0"""
        model = _model(scd_config)
        x = image_pair[0]
        with torch.no_grad():
            ref1, _ = model.seg_decode(model.encode(x))
            ref2, _ = model.seg_decode(model.encode(x.clone()))
            _, diffs = model.cd_decode(ref1, ref2, return_features=True)
        for value in diffs.values():
            assert torch.count_nonzero(value) == 0

    def test_differences_are_swap_symmetric(self, scd_config, image_pair):
        model = _model(scd_config)
        x1, x2 = image_pair
        with torch.no_grad():
            ref1, _ = model.seg_decode(model.encode(x1))
            ref2, _ = model.seg_decode(model.encode(x2))
            _, forward_diffs = model.cd_decode(ref1, ref2, return_features=True)
            _, swapped_diffs = model.cd_decode(ref2, ref1, return_features=True)
        for name in forward_diffs:
            assert torch.equal(forward_diffs[name], swapped_diffs[name])


class TestParameters:
    """
    參數計數與推論路徑隔離
    """

    def test_full_is_inference_plus_ttg(self, scd_config):
        model = _model(scd_config)
        assert model.param_count("full") == model.param_count("inference") + model.param_count("ttg")
        assert model.param_count("ttg") > 0

    def test_unknown_scope(self, scd_config):
        with pytest.raises(ConfigError, match="參數範圍"):
            _model(scd_config).param_count("decoder")

    def test_asi_adds_ttg_parameters_only(self):
        """關閉 ASI 只影響 TTG 的參數量"""
        with_asi = tiny_config(Task.SCD)
        without_asi = tiny_config(Task.SCD)
        without_asi.ttg.asi_enabled = False
        a, b = _model(with_asi), _model(without_asi)
        assert a.param_count("inference") == b.param_count("inference")
        assert a.param_count("ttg") > b.param_count("ttg")

    def test_inference_weights_independent_of_ttg(self, scd_config):
        """相同 seed 下，有無 TTG 的推論路徑初始權重相同"""
        a = _model(scd_config, with_ttg=True)
        b = _model(scd_config, with_ttg=False)
        b_state = b.state_dict()
        for key, value in a.state_dict().items():
            if not key.startswith("ttg."):
                assert torch.equal(value, b_state[key]), key

    def test_inference_ignores_ttg_weights(self, scd_config, image_pair):
        """隨機化 TTG 權重後推論輸出完全相同"""
        model = _model(scd_config)
        with torch.no_grad():
            before = model.forward_inference(*image_pair)
            scrambled = copy.deepcopy(model)
            for parameter in scrambled.ttg.parameters():
                parameter.copy_(torch.randn_like(parameter))
            after = scrambled.forward_inference(*image_pair)
        assert torch.equal(before.change_logits, after.change_logits)
        assert torch.equal(before.sem_logits_t1, after.sem_logits_t1)

    def test_forward_train_requires_ttg(self, scd_config, image_pair):
        model = _model(scd_config, with_ttg=False)
        with pytest.raises(ConfigError, match="TTG"):
            model.forward_train(*image_pair)
        outputs = model.forward_train(*image_pair, run_ttg=False)
        assert outputs.delta_t1 is None

    def test_forward_train_deltas_match_tokens(self, scd_config, image_pair):
        model = _model(scd_config)
        outputs = model.forward_train(*image_pair)
        assert outputs.grid == (2, 2)
        assert outputs.delta_t1.shape == outputs.tokens_t1.shape == (2, 4, 64)
        assert outputs.delta_t2.shape == outputs.tokens_t2.shape
