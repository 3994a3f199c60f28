"""
測試模組 - 重建映射、token 標籤與損失函式
"""

import math

import pytest
import torch
from torch.autograd import gradcheck

from src.config import Directionality, LossWeights, Task
from src.consistency import (
    downsample_change_mask,
    loss_change,
    loss_recon,
    loss_recon_bitemporal,
    loss_sa,
    loss_sem,
    loss_total,
    loss_trans,
    reconstruct,
    token_labels_from_mask,
)
from src.errors import ConfigError, DataError, ShapeError


def _dyadic(*shape, seed=0):
    """以 1/8 為單位的值，加減法在 float64 下沒有捨入誤差"""
    generator = torch.Generator().manual_seed(seed)
    return torch.randint(-64, 64, shape, generator=generator).to(torch.float64) / 8


class TestReconstruct:
    """
    重建映射
    """

    def test_identity_with_exact_transitions(self):
        """Δ_1 = I_1 - I_2、Δ_2 = I_2 - I_1 時重建結果逐位元相同"""
        i1, i2 = _dyadic(2, 4, 8, seed=1), _dyadic(2, 4, 8, seed=2)
        hat1, hat2 = reconstruct(i1, i2, i1 - i2, i2 - i1, Directionality.TWO_WAY)
        assert torch.equal(hat1, i1)
        assert torch.equal(hat2, i2)

    def test_one_way_variants(self):
        i1, i2 = _dyadic(1, 4, 8), _dyadic(1, 4, 8, seed=3)
        d = torch.zeros_like(i1)
        hat1, hat2 = reconstruct(i1, i2, d, d, Directionality.ONE_WAY_EQ1)
        assert hat1 is None and torch.equal(hat2, i1)
        hat1, hat2 = reconstruct(i1, i2, d, d, Directionality.ONE_WAY_EQ2)
        assert hat2 is None and torch.equal(hat1, i2)

    def test_shape_mismatch(self):
        a = torch.zeros(1, 4, 8)
        with pytest.raises(ShapeError):
            reconstruct(a, a, a, torch.zeros(1, 4, 7))


class TestTokenLabels:
    """
    以多數決得到 token 標籤
    """

    def test_changed_patch_is_negative(self):
        mask = torch.zeros(4, 4)
        mask[:2, :2] = 1
        labels = token_labels_from_mask(mask, (2, 2))
        assert labels.y.tolist() == [-1, 1, 1, 1]
        assert labels.change_fraction == pytest.approx(0.25)

    def test_exact_half_is_unchanged(self):
        """恰好一半變化不算變化"""
        mask = torch.zeros(1, 2, 2)
        mask[0, 0, :] = 1
        assert not bool(downsample_change_mask(mask, (1, 1)).any())

    def test_batched_shape(self):
        labels = token_labels_from_mask(torch.ones(3, 64, 64), (2, 2))
        assert labels.y.shape == (3, 4)
        assert bool((labels.y == -1).all())

    def test_indivisible_grid(self):
        with pytest.raises(ShapeError):
            downsample_change_mask(torch.zeros(5, 5), (2, 2))


class TestInfoNCE:
    """
    重建損失
    """

    def test_single_token_is_zero(self):
        """B = L = 1 時只有正樣本，損失為 0"""
        x = torch.randn(1, 1, 8, dtype=torch.float64)
        assert float(loss_recon(x, x * 2.0)) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_two_tokens(self):
        """兩個正交 token 完美重建時損失為 -log(e^{1/τ} / (e^{1/τ} + 1))，τ = 0.07"""
        tau = 0.07
        x = torch.eye(2, dtype=torch.float64).unsqueeze(0)
        expected = -math.log(math.exp(1.0 / tau) / (math.exp(1.0 / tau) + 1.0))
        assert float(loss_recon(x, x.clone(), tau)) == pytest.approx(expected, abs=1e-9)

    def test_invalid_tau(self):
        x = torch.randn(1, 2, 4)
        with pytest.raises(ConfigError, match="tau"):
            loss_recon(x, x, tau=0.0)

    def test_batch_permutation_invariance(self):
        """同時打亂原始與重建的 batch 順序，損失不變"""
        generator = torch.Generator().manual_seed(5)
        original = torch.randn(4, 3, 8, generator=generator, dtype=torch.float64)
        rebuilt = original + 0.3 * torch.randn(4, 3, 8, generator=generator, dtype=torch.float64)
        order = torch.tensor([2, 0, 3, 1])
        torch.testing.assert_close(loss_recon(original[order], rebuilt[order]), loss_recon(original, rebuilt))

    def test_increases_with_corruption(self):
        """重建逐步偏向相鄰 token 時損失嚴格遞增"""
        original = torch.eye(4, dtype=torch.float64).unsqueeze(0)
        shifted = torch.roll(original, shifts=1, dims=1)
        values = [
            float(loss_recon(original, (1.0 - alpha) * original + alpha * shifted))
            for alpha in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
        ]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_true_transitions_beat_random(self):
        """20 個 seed 下，正確 Δ 的重建損失都低於隨機 Δ"""
        for seed in range(20):
            generator = torch.Generator().manual_seed(seed)
            i1 = torch.randn(1, 16, 8, generator=generator, dtype=torch.float64)
            i2 = torch.randn(1, 16, 8, generator=generator, dtype=torch.float64)
            r1 = torch.randn(1, 16, 8, generator=generator, dtype=torch.float64)
            r2 = torch.randn(1, 16, 8, generator=generator, dtype=torch.float64)
            true_hat = reconstruct(i1, i2, i1 - i2, i2 - i1)
            random_hat = reconstruct(i1, i2, r1, r2)
            true_loss = loss_recon_bitemporal(i1, i2, *true_hat)
            random_loss = loss_recon_bitemporal(i1, i2, *random_hat)
            assert float(true_loss) < float(random_loss), seed

    def test_bitemporal_sums_available_terms(self):
        x1, x2 = torch.randn(1, 4, 8), torch.randn(1, 4, 8)
        both = loss_recon_bitemporal(x1, x2, x1, x2)
        torch.testing.assert_close(both, loss_recon(x1, x1) + loss_recon(x2, x2))
        assert loss_recon_bitemporal(x1, x2, None, None) is None


class TestTransitionAndAlignment:
    """
    transition 約束與語意對齊
    """

    def test_trans_values(self):
        """相同 Δ：未變化 token 損失為 0，變化 token 損失為 1"""
        d = torch.randn(1, 4, 8, dtype=torch.float64)
        mask = torch.zeros(1, 4, 4)
        unchanged = token_labels_from_mask(mask, (2, 2))
        assert float(loss_trans(d, d.clone(), unchanged)) == pytest.approx(0.0, abs=1e-12)
        changed = token_labels_from_mask(torch.ones(1, 4, 4), (2, 2))
        assert float(loss_trans(d, d.clone(), changed)) == pytest.approx(1.0)

    def test_trans_scale_invariant_and_bounded(self):
        """正數縮放不改變損失，且損失落在 [0, 2]"""
        mask = torch.zeros(2, 8, 8)
        mask[0, :4, :4] = 1
        labels = token_labels_from_mask(mask, (2, 2))
        for seed in range(10):
            generator = torch.Generator().manual_seed(seed)
            d1 = torch.randn(2, 4, 6, generator=generator, dtype=torch.float64)
            d2 = torch.randn(2, 4, 6, generator=generator, dtype=torch.float64)
            value = loss_trans(d1, d2, labels)
            torch.testing.assert_close(loss_trans(3.0 * d1, 0.25 * d2, labels), value)
            assert 0.0 <= float(value) <= 2.0

    def test_trans_orthogonal_changed_is_zero(self):
        """變化 token 的 Δ 彼此正交時損失為 0"""
        d1 = torch.zeros(1, 4, 4, dtype=torch.float64)
        d2 = torch.zeros(1, 4, 4, dtype=torch.float64)
        d1[..., 0] = 1.0
        d2[..., 1] = 1.0
        changed = token_labels_from_mask(torch.ones(1, 4, 4), (2, 2))
        assert float(loss_trans(d1, d2, changed)) == 0.0

    def test_trans_label_shape(self):
        d = torch.randn(1, 4, 8)
        labels = token_labels_from_mask(torch.zeros(1, 3, 3), (3, 3))
        with pytest.raises(ShapeError):
            loss_trans(d, d, labels)

    def test_sa_zero_for_identical_features(self):
        feat = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        assert float(loss_sa(feat, feat.clone(), torch.zeros(2, 32, 32))) == pytest.approx(0.0, abs=1e-12)

    def test_sa_orthogonal_features_is_one(self):
        f1 = torch.zeros(1, 4, 8, 8, dtype=torch.float64)
        f2 = torch.zeros(1, 4, 8, 8, dtype=torch.float64)
        f1[:, 0] = 1.0
        f2[:, 1] = 2.0
        assert float(loss_sa(f1, f2, torch.zeros(1, 32, 32))) == pytest.approx(1.0, abs=1e-12)

    def test_sa_all_changed_has_zero_gradient(self):
        f1 = torch.randn(1, 4, 8, 8, requires_grad=True)
        f2 = torch.randn(1, 4, 8, 8)
        value = loss_sa(f1, f2, torch.ones(1, 32, 32))
        value.backward()
        assert float(value) == 0.0
        assert torch.count_nonzero(f1.grad) == 0


class TestCrossEntropy:
    """
    變化與語意交叉熵
    """

    def test_change_label_range(self):
        with pytest.raises(DataError, match="0/1"):
            loss_change(torch.randn(1, 2, 4, 4), torch.full((1, 4, 4), 2))

    def test_uniform_change_logits(self):
        """均勻 logits 的變化交叉熵為 ln 2"""
        gt = torch.randint(0, 2, (2, 4, 4), generator=torch.Generator().manual_seed(0))
        logits = torch.zeros(2, 2, 4, 4, dtype=torch.float64)
        assert float(loss_change(logits, gt)) == pytest.approx(math.log(2), abs=1e-12)

    def test_uniform_semantic_logits(self):
        """6 類均勻 logits 時兩期語意交叉熵之和為 2 ln 6"""
        generator = torch.Generator().manual_seed(1)
        logits = torch.zeros(2, 6, 4, 4, dtype=torch.float64)
        gt1 = torch.randint(0, 6, (2, 4, 4), generator=generator)
        gt2 = torch.randint(0, 6, (2, 4, 4), generator=generator)
        assert float(loss_sem(logits, logits, gt1, gt2)) == pytest.approx(2 * math.log(6), abs=1e-12)

    def test_sem_ignores_index(self):
        logits = torch.randn(1, 3, 4, 4)
        labels = torch.full((1, 4, 4), 255)
        assert float(loss_sem(logits, logits, labels, labels)) == 0.0

    def test_sem_rejects_out_of_range(self):
        logits = torch.randn(1, 3, 4, 4)
        labels = torch.zeros(1, 4, 4, dtype=torch.long)
        labels[0, 0, 0] = 3
        with pytest.raises(DataError, match="超出類別數"):
            loss_sem(logits, logits, labels, labels)


class TestGradients:
    """
    以 float64 有限差分檢查解析梯度
    """

    def test_recon_gradcheck(self):
        a = torch.randn(1, 3, 5, dtype=torch.float64, requires_grad=True)
        b = torch.randn(1, 3, 5, dtype=torch.float64, requires_grad=True)
        assert gradcheck(lambda x, y: loss_recon(x, y, 0.5), (a, b), eps=1e-6, atol=1e-5)

    def test_trans_gradcheck(self):
        mask = torch.zeros(1, 4, 4)
        mask[:, :2, :2] = 1
        labels = token_labels_from_mask(mask, (2, 2))
        d1 = torch.randn(1, 4, 6, dtype=torch.float64, requires_grad=True)
        d2 = torch.randn(1, 4, 6, dtype=torch.float64, requires_grad=True)
        assert gradcheck(lambda x, y: loss_trans(x, y, labels), (d1, d2), eps=1e-6, atol=1e-5)

    def test_sa_gradcheck(self):
        mask = torch.zeros(1, 8, 8)
        mask[:, :4, :] = 1
        f1 = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
        f2 = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
        assert gradcheck(lambda x, y: loss_sa(x, y, mask), (f1, f2), eps=1e-6, atol=1e-5)

    def test_change_gradcheck(self):
        logits = torch.randn(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
        gt = torch.randint(0, 2, (1, 3, 3))
        assert gradcheck(lambda x: loss_change(x, gt), (logits,), eps=1e-6, atol=1e-5)


class TestLossTotal:
    """
    總損失組合
    """

    def _parts(self):
        return {name: torch.tensor(float(i)) for i, name in enumerate(["change", "sem", "sa", "recon", "trans"], 1)}

    def test_weighted_sum(self):
        """1 + 2 + 3 + 0.1 * 4 + 1.0 * 5"""
        report = loss_total(self._parts(), LossWeights(lambda1=0.1, lambda2=1.0), Task.SCD)
        assert float(report.total) == pytest.approx(11.4)
        assert float(report.l_cd) == pytest.approx(6.0)
        assert report.active_terms == {"l_change", "l_sem", "l_sa", "l_recon", "l_trans"}

    def test_disabled_terms_equal_l_cd(self):
        weights = LossWeights(enable_recon=False, enable_trans=False)
        report = loss_total(self._parts(), weights, Task.SCD)
        assert float(report.total) == float(report.l_cd)
        assert report.as_dict()["l_recon"] == 0.0

    def test_zero_lambda_equals_l_cd(self):
        report = loss_total(self._parts(), LossWeights(lambda1=0.0, lambda2=0.0), Task.SCD)
        assert float(report.total) == pytest.approx(6.0)

    def test_bcd_drops_semantic_terms(self):
        report = loss_total(self._parts(), LossWeights(), Task.BCD)
        assert float(report.l_cd) == 1.0
        assert "l_sem" not in report.active_terms

    def test_requires_a_term(self):
        with pytest.raises(ValueError):
            loss_total({"change": None}, LossWeights(), Task.BCD)
