"""Loss and metrics: PSNR closed forms, SSIM monotonicity, MS-SSIM against a
formula-level reimplementation, LAB RMSE against reference color math, and
the loss gradient against central differences."""

import math
import warnings

import numpy as np
import pytest
import torch

from lightnorm.errors import InputError
from lightnorm.quality import (
    LossConfig,
    MS_SSIM_WEIGHTS,
    lab_rmse,
    loss_terms,
    ms_ssim,
    psnr,
    srgb_to_lab,
    ssim,
    ssim_np,
    total_loss,
)

from oracles import central_diff, ms_ssim_ref, relative_error, srgb_to_lab_ref


def _pair(h=64, w=64, seed=0, noise=0.1):
    rng = np.random.default_rng(seed)
    gt = rng.random((1, 3, h, w))
    noisy = np.clip(gt + rng.normal(0, noise, gt.shape), 0, 1)
    return torch.from_numpy(gt), torch.from_numpy(noisy)


class TestPsnr:
    def test_identical_hits_cap(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        assert psnr(img, img.copy()) == 100.0

    def test_zeros_vs_ones_is_zero_db(self):
        assert psnr(np.zeros((8, 8, 3)), np.ones((8, 8, 3))) == 0.0

    def test_quarter_mse_closed_form(self):
        gt = np.zeros((4, 4, 3))
        restored = np.full((4, 4, 3), 0.5)
        assert abs(psnr(gt, restored) - 10 * math.log10(4)) < 1e-12
        assert abs(psnr(gt, restored) - 6.0206) < 1e-4

    def test_symmetry_exact(self):
        a = np.random.default_rng(1).random((12, 9, 3))
        b = np.random.default_rng(2).random((12, 9, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestSsim:
    def test_identical_is_one(self):
        gt, _ = _pair()
        assert abs(float(ssim(gt, gt.clone())) - 1.0) < 1e-12

    def test_noise_monotonic(self):
        rng = np.random.default_rng(3)
        gt = torch.from_numpy(rng.random((1, 3, 64, 64)))
        values = []
        for sigma in (0.02, 0.05, 0.1, 0.2):
            noisy = torch.from_numpy(
                np.clip(gt.numpy() + rng.normal(0, sigma, gt.shape), 0, 1))
            values.append(float(ssim(gt, noisy)))
        assert all(0 < v < 1 for v in values)
        assert values == sorted(values, reverse=True)

    def test_equals_single_scale_ms_ssim(self):
        gt, noisy = _pair(seed=4)
        one = LossConfig(ms_ssim_scales=1, ms_ssim_weights=(1.0,))
        assert abs(float(ssim(gt, noisy)) - float(ms_ssim(gt, noisy, one))) < 1e-8


class TestMsSsim:
    def test_weights_normalized(self):
        assert abs(sum(MS_SSIM_WEIGHTS) - 1.0) < 1e-12

    def test_matches_reference_20_pairs_256(self):
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            gt = rng.random((256, 256, 3))
            noisy = np.clip(gt + rng.normal(0, 0.08, gt.shape), 0, 1)
            ours = float(ms_ssim(
                torch.from_numpy(gt.transpose(2, 0, 1))[None],
                torch.from_numpy(noisy.transpose(2, 0, 1))[None],
            ))
            ref = ms_ssim_ref(gt, noisy, MS_SSIM_WEIGHTS)
            worst = max(worst, abs(ours - ref))
        assert worst < 1e-6

    def test_structured_image_matches_reference(self):
        rng = np.random.default_rng(99)
        yy, xx = np.mgrid[0:256, 0:256] / 256.0
        gt = np.stack([yy, xx, 0.5 + 0.4 * np.sin(8 * yy)], axis=2)
        deg = np.clip(gt * (0.6 + 0.4 * xx[:, :, None]), 0, 1)
        ours = float(ms_ssim(
            torch.from_numpy(gt.transpose(2, 0, 1))[None],
            torch.from_numpy(deg.transpose(2, 0, 1))[None],
        ))
        assert abs(ours - ms_ssim_ref(gt, deg, MS_SSIM_WEIGHTS)) < 1e-6

    def test_unity_iff_equal(self):
        gt, noisy = _pair(h=192, w=192, seed=5)
        assert abs(float(ms_ssim(gt, gt.clone())) - 1.0) < 1e-9
        assert float(ms_ssim(gt, noisy)) < 1.0 - 1e-6

    def test_range_on_random_inputs(self):
        for seed in range(10):
            gt, noisy = _pair(h=176, w=176, seed=seed, noise=0.3)
            value = float(ms_ssim(gt, noisy))
            assert 0.0 < value <= 1.0

    def test_small_image_reduces_scales_with_warning(self):
        gt, noisy = _pair(h=64, w=64, seed=6)
        with pytest.warns(UserWarning, match="scales"):
            value = float(ms_ssim(gt, noisy))
        assert 0.0 < value <= 1.0


class TestTotalLoss:
    def test_identical_is_zero(self):
        gt, _ = _pair(h=176, w=176)
        assert float(total_loss(gt, gt.clone())) == 0.0

    def test_lambda_arithmetic(self):
        # mae 0.1 and ms-ssim 0.9 with lambda 0.25 -> 0.1 + 0.25*0.1 = 0.125
        gt, noisy = _pair(h=176, w=176, seed=7)
        mae = float((gt - noisy).abs().mean())
        ms = float(ms_ssim(gt, noisy))
        expect = mae + 0.25 * (1.0 - ms)
        assert abs(float(total_loss(gt, noisy)) - expect) < 1e-12
        terms = loss_terms(gt, noisy)
        assert abs(terms["total"] - expect) < 1e-9
        assert abs(0.1 + 0.25 * (1 - 0.9) - 0.125) < 1e-15

    def test_differentiable_wrt_restored(self):
        gt, noisy = _pair(h=64, w=64, seed=8)
        noisy = noisy.clone().requires_grad_(True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            loss = total_loss(gt, noisy)
        loss.backward()
        assert noisy.grad is not None and torch.isfinite(noisy.grad).all()

    def test_gradient_vs_central_differences(self):
        rng = np.random.default_rng(9)
        gt = torch.from_numpy(rng.random((1, 3, 64, 64)))
        restored_np = np.clip(rng.random((1, 3, 64, 64)), 0.05, 0.95)
        restored = torch.from_numpy(restored_np.copy()).requires_grad_(True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            total_loss(gt, restored).backward()
        analytic = restored.grad.numpy()

        coords = [tuple(rng.integers(0, s) for s in restored_np.shape) for _ in range(40)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            numeric = []
            for c in coords:
                orig = restored_np[c]
                restored_np[c] = orig + 1e-5
                up = float(total_loss(gt, torch.from_numpy(restored_np)))
                restored_np[c] = orig - 1e-5
                down = float(total_loss(gt, torch.from_numpy(restored_np)))
                restored_np[c] = orig
                numeric.append((up - down) / 2e-5)
        sampled = np.array([analytic[c] for c in coords])
        assert relative_error(sampled, np.array(numeric)) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            total_loss(torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 32, 16))


class TestLab:
    def test_white_point(self):
        lab = srgb_to_lab(np.ones((1, 1, 3)))
        assert abs(lab[0, 0, 0] - 100.0) < 1e-4
        assert abs(lab[0, 0, 1]) < 1e-4 and abs(lab[0, 0, 2]) < 1e-4

    def test_matches_reference_formulas(self):
        rng = np.random.default_rng(10)
        img = rng.random((5, 4, 3))
        assert np.abs(srgb_to_lab(img) - srgb_to_lab_ref(img)).max() < 1e-9

    def test_identical_images_zero(self):
        img = np.random.default_rng(11).random((8, 8, 3))
        out = lab_rmse(img, img.copy(), np.zeros((8, 8), bool))
        assert out["total"] == 0.0 and out["shadow_free"] == 0.0

    def test_all_ones_mask_shadow_equals_total(self):
        rng = np.random.default_rng(12)
        a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        with pytest.warns(UserWarning, match="empty"):
            out = lab_rmse(a, b, np.ones((8, 8), bool))
        assert abs(out["shadow"] - out["total"]) < 1e-12
        assert math.isnan(out["shadow_free"])

    def test_decomposition_identity(self):
        rng = np.random.default_rng(13)
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        mask = rng.random((16, 16)) > 0.6
        out = lab_rmse(a, b, mask)
        n, ns, nf = mask.size, mask.sum(), (~mask).sum()
        lhs = out["total"] ** 2 * n
        rhs = out["shadow"] ** 2 * ns + out["shadow_free"] ** 2 * nf
        assert abs(lhs - rhs) < 1e-6

    def test_absent_mask_only_total(self):
        rng = np.random.default_rng(14)
        out = lab_rmse(rng.random((4, 4, 3)), rng.random((4, 4, 3)))
        assert set(out) == {"total"}

    def test_mask_shape_mismatch(self):
        with pytest.raises(InputError):
            lab_rmse(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((3, 3), bool))


class TestNumpyBridge:
    def test_ssim_np_matches_torch(self):
        rng = np.random.default_rng(15)
        a, b = rng.random((64, 48, 3)), rng.random((64, 48, 3))
        t = lambda x: torch.from_numpy(x.transpose(2, 0, 1))[None]
        assert abs(ssim_np(a, b) - float(ssim(t(a), t(b)))) < 1e-12
