import numpy as np
import pytest

from desksplat.errors import ConfigError
from desksplat.scene import (
    SH_C0,
    Camera,
    Gaussian3D,
    ShBasis,
    covariance_3d,
    covariance_3d_backward,
    covariance_3d_batch,
    eval_sh_color,
    eval_sh_colors,
    eval_sh_colors_backward,
    look_at_camera,
    quat_to_rot,
    sh_basis,
)

from helpers import finite_diff, rel_err


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def make_gaussian(sh_coeffs, **kw):
    defaults = dict(
        position=np.zeros(3), rotation=np.array([1.0, 0, 0, 0]),
        log_scale=np.zeros(3), opacity_logit=0.0,
        sh_coeffs=np.asarray(sh_coeffs, dtype=np.float64))
    defaults.update(kw)
    return Gaussian3D(**defaults)


class TestShBasis:
    def test_degree0_constant(self):
        basis = ShBasis(0)
        for d in [(0, 0, 1), (1, 0, 0), unit((1, 2, -3))]:
            assert basis(np.asarray(d, dtype=np.float64))[0] == pytest.approx(
                0.28209479177, abs=1e-11)

    def test_bad_degree(self):
        with pytest.raises(ConfigError):
            ShBasis(4)

    def test_dims(self):
        for deg in range(4):
            assert ShBasis(deg).dim == (deg + 1) ** 2


class TestEvalShColor:
    def test_zero_coeffs_give_half(self):
        g = make_gaussian(np.zeros((1, 3)))
        for d in [(0, 0, 1), unit((1, 1, 1))]:
            np.testing.assert_allclose(eval_sh_color(g, d), [0.5, 0.5, 0.5])

    def test_dc_solves_to_one(self):
        # 0.28209479 * c + 0.5 = 1  =>  c = 0.5 / Y00
        c = 0.5 / SH_C0
        g = make_gaussian([[c, 0.0, 0.0]])
        col = eval_sh_color(g, unit((0.3, -0.2, 1.0)))
        assert col[0] == pytest.approx(1.0, abs=1e-12)
        assert col[1] == pytest.approx(0.5)

    def test_degree1_odd_symmetry(self):
        sh = np.zeros((4, 3))
        sh[2, 0] = 0.4  # z-linear band, red
        g = make_gaussian(sh)
        up = eval_sh_color(g, (0.0, 0.0, 1.0))
        down = eval_sh_color(g, (0.0, 0.0, -1.0))
        assert up[0] - 0.5 == pytest.approx(-(down[0] - 0.5), abs=1e-12)
        assert up[0] != pytest.approx(down[0])

    def test_degree0_view_independent(self):
        g = make_gaussian([[0.3, -0.2, 0.7]])
        rng = np.random.default_rng(0)
        ref = eval_sh_color(g, (0, 0, 1))
        for _ in range(10):
            d = unit(rng.normal(size=3))
            np.testing.assert_allclose(eval_sh_color(g, d), ref)

    def test_coeff_length_mismatch(self):
        with pytest.raises(ConfigError):
            eval_sh_colors(np.zeros((1, 5, 3)), np.array([[0.0, 0.0, 1.0]]))

    def test_clamp_at_zero(self):
        g = make_gaussian([[-10.0, 0.0, 0.0]])
        col = eval_sh_color(g, (0, 0, 1))
        assert col[0] == 0.0


class TestCovariance3d:
    def test_identity(self):
        g = make_gaussian(np.zeros((1, 3)))
        np.testing.assert_allclose(covariance_3d(g), np.eye(3), atol=1e-15)

    def test_log2_scale(self):
        g = make_gaussian(np.zeros((1, 3)), log_scale=np.array([np.log(2.0), 0, 0]))
        np.testing.assert_allclose(covariance_3d(g), np.diag([4.0, 1.0, 1.0]),
                                   atol=1e-14)

    def test_eigenvalues_match_scales(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            q = unit(rng.normal(size=4))
            s = rng.uniform(-1.0, 1.0, size=3)
            g = make_gaussian(np.zeros((1, 3)), rotation=q, log_scale=s)
            ev = np.sort(np.linalg.eigvalsh(covariance_3d(g)))
            np.testing.assert_allclose(ev, np.sort(np.exp(2 * s)), rtol=1e-12)

    def test_spd_for_random_inputs(self):
        rng = np.random.default_rng(3)
        quats = rng.normal(size=(200, 4))
        scales = rng.uniform(-3, 3, size=(200, 3))
        cov = covariance_3d_batch(quats, scales)
        ev = np.linalg.eigvalsh(cov)
        assert (ev > 0).all()


class TestDerivatives:
    """Analytic partials vs central differences, h=1e-5, rel err < 1e-3."""

    def test_sh_color_derivatives(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            deg = int(rng.integers(0, 4))
            k = (deg + 1) ** 2
            sh = rng.normal(0.2, 0.4, size=(1, k, 3))
            d = unit(rng.normal(size=3))[None]
            d_color = rng.normal(size=(1, 3))

            def loss_sh(x):
                return float(np.sum(eval_sh_colors(x, d) * d_color))

            def loss_dir(x):
                return float(np.sum(eval_sh_colors(sh, x) * d_color))

            a_sh, a_dir = eval_sh_colors_backward(sh, d, d_color)
            fd_sh = finite_diff(loss_sh, sh.copy())
            fd_dir = finite_diff(loss_dir, d.copy())
            assert rel_err(a_sh, fd_sh).max() < 1e-3
            assert rel_err(a_dir, fd_dir).max() < 1e-3

    def test_covariance_derivatives(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            q = rng.normal(size=(1, 4))
            s = rng.uniform(-1, 1, size=(1, 3))
            d_sigma = rng.normal(size=(1, 3, 3))
            d_sigma = 0.5 * (d_sigma + np.swapaxes(d_sigma, 1, 2))

            def loss_q(x):
                return float(np.sum(covariance_3d_batch(x, s) * d_sigma))

            def loss_s(x):
                return float(np.sum(covariance_3d_batch(q, x) * d_sigma))

            a_q, a_s = covariance_3d_backward(q, s, d_sigma)
            assert rel_err(a_q, finite_diff(loss_q, q.copy())).max() < 1e-3
            assert rel_err(a_s, finite_diff(loss_s, s.copy())).max() < 1e-3


class TestCamera:
    def test_rotation_validation(self):
        with pytest.raises(ConfigError):
            Camera(fx=10, fy=10, cx=4, cy=4, width=8, height=8,
                   R=np.eye(3) * 2.0, t=np.zeros(3))

    def test_min_resolution(self):
        with pytest.raises(ConfigError):
            Camera(fx=10, fy=10, cx=2, cy=2, width=4, height=8,
                   R=np.eye(3), t=np.zeros(3))

    def test_reflection_rejected(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ConfigError):
            Camera(fx=10, fy=10, cx=4, cy=4, width=8, height=8,
                   R=R, t=np.zeros(3))

    def test_look_at_center_roundtrip(self):
        cam = look_at_camera(eye=(1.0, 2.0, -3.0), target=(0, 0, 0),
                             up=(0, 1, 0), fx=20, fy=20, width=16, height=16)
        np.testing.assert_allclose(cam.center, [1.0, 2.0, -3.0], atol=1e-12)
        assert np.linalg.det(cam.R) == pytest.approx(1.0)

    def test_scaled_intrinsics(self):
        cam = look_at_camera(eye=(0, 0, -3), target=(0, 0, 0), up=(0, 1, 0),
                             fx=40, fy=40, width=32, height=16)
        half = cam.scaled(2)
        assert half.width == 16 and half.height == 8
        assert half.fx == cam.fx / 2
        assert half.cx == pytest.approx((half.width - 1) / 2.0)

    def test_quat_to_rot_orthonormal(self):
        rng = np.random.default_rng(5)
        q = rng.normal(size=(50, 4))
        R = quat_to_rot(q)
        eye = np.einsum("nij,nkj->nik", R, R)
        np.testing.assert_allclose(eye, np.broadcast_to(np.eye(3), (50, 3, 3)),
                                   atol=1e-12)
        assert np.allclose(np.linalg.det(R), 1.0)
