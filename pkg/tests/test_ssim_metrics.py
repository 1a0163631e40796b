import math

import numpy as np
import pytest

from desksplat.errors import ContractError
from desksplat.metrics import (
    MaskIou,
    ViewRow,
    mask_iou,
    psnr,
    read_metrics_csv,
    ssim,
    write_metrics_csv,
)
from desksplat.ssim import C1, dssim_map, ssim_map, ssim_map_backward

from helpers import finite_diff, rel_err


class TestPsnr:
    def test_identical_is_infinite(self):
        a = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert math.isinf(psnr(a, a.copy()))

    def test_uniform_shift(self):
        a = np.zeros((16, 16, 3))
        b = np.full((16, 16, 3), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)

    def test_region_ignores_rest(self):
        a = np.zeros((8, 8, 3))
        b = a.copy()
        b[:, 4:] = 0.7  # corrupt the right half only
        region = np.zeros((8, 8), dtype=bool)
        region[:, :4] = True
        assert math.isinf(psnr(a, b, region))

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(8, 8, 3))
        b = rng.uniform(size=(8, 8, 3))
        assert psnr(a, b) == pytest.approx(psnr(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestSsim:
    def test_identical_is_one(self):
        a = np.random.default_rng(2).uniform(size=(20, 24, 3))
        assert ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-12)
        assert (1.0 - ssim(a, a.copy())) / 2.0 == pytest.approx(0.0, abs=1e-12)

    def test_constant_shift_closed_form(self):
        # constant images: variances vanish, SSIM reduces to the luminance
        # term (2 mu_x mu_y + C1) / (mu_x^2 + mu_y^2 + C1)
        mu = 0.25
        shift = 0.5
        a = np.full((24, 20, 3), mu)
        b = a + shift
        expected = (2 * mu * (mu + shift) + C1) / (mu ** 2 + (mu + shift) ** 2 + C1)
        assert ssim(a, b) == pytest.approx(expected, abs=1e-12)
        assert ssim(a, b) < 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(size=(16, 16, 3))
        b = np.clip(a + rng.normal(0, 0.2, size=a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_small_region(self):
        a = np.random.default_rng(4).uniform(size=(9, 9, 3))
        region = np.zeros((9, 9), dtype=bool)
        region[2:5, 2:5] = True  # smaller than the 11x11 window
        val = ssim(a, a.copy(), region)
        assert val == pytest.approx(1.0, abs=1e-12)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(0.2, 0.8, size=(12, 10, 3))
        y = rng.uniform(0.2, 0.8, size=(12, 10, 3))
        d_map = rng.normal(size=x.shape)

        def loss(xx):
            return float(np.sum(ssim_map(xx, y) * d_map))

        analytic = ssim_map_backward(x, y, d_map)
        fd = finite_diff(loss, x.copy(), h=1e-6)
        assert rel_err(analytic, fd, floor=1e-4).max() < 1e-3

    def test_dssim_map_range(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(size=(16, 16, 3))
        b = rng.uniform(size=(16, 16, 3))
        d = dssim_map(a, b)
        assert (d >= 0).all() and (d <= 1).all()


class TestMaskIou:
    def test_exact_match(self):
        oracle = np.zeros((10, 10), dtype=bool)
        oracle[:, :5] = True
        pred = oracle.astype(float)
        iou = mask_iou(pred, oracle)
        assert iou.static == 1.0 and iou.transient == 1.0

    def test_all_static_pred_vs_partial_oracle(self):
        oracle = np.ones((10, 10), dtype=bool)
        oracle[:2, :] = False  # 20% transient
        pred = np.ones((10, 10))
        iou = mask_iou(pred, oracle)
        assert iou.transient == 0.0

    def test_half_transient_found(self):
        oracle = np.ones((10, 10), dtype=bool)
        oracle[0:2, :] = False  # 20 transient pixels
        pred = np.ones((10, 10))
        pred[0, :] = 0.0  # half of them predicted, no false positives
        iou = mask_iou(pred, oracle)
        assert iou.transient == pytest.approx(0.5)

    def test_all_static_oracle_sentinels(self):
        oracle = np.ones((10, 10), dtype=bool)
        good = mask_iou(np.ones((10, 10)), oracle)
        assert good.transient == 1.0 and not good.transient_defined
        bad = mask_iou(np.full((10, 10), 0.2), oracle)
        assert bad.transient == 0.0 and not bad.transient_defined

    def test_range(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            pred = rng.uniform(size=(8, 8))
            oracle = rng.uniform(size=(8, 8)) > 0.3
            iou = mask_iou(pred, oracle)
            assert 0.0 <= iou.static <= 1.0
            assert 0.0 <= iou.transient <= 1.0


class TestMetricsCsv:
    def test_roundtrip_and_cap(self, tmp_path):
        rows = [
            ViewRow(iteration=100, view_id="test_000", psnr=math.inf,
                    ssim=1.0, gaussian_count=42),
            ViewRow(iteration=100, view_id="train_000", iou_static=0.9,
                    iou_transient=0.5, gaussian_count=42),
        ]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, rows)
        got = read_metrics_csv(path)
        assert got[0].psnr == 99.0  # +inf capped in the CSV
        assert got[0].ssim == 1.0
        assert got[1].psnr is None
        assert got[1].iou_transient == 0.5

    def test_decimal_point_format(self, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics_csv(path, [ViewRow(iteration=1, view_id="v", psnr=20.25,
                                         ssim=0.5, gaussian_count=1)])
        text = path.read_text(encoding="utf-8")
        assert "20.25" in text and "," in text
