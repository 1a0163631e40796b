"""Shared test utilities: random scene construction and finite differences."""

import numpy as np

from desksplat.scene import Camera, GaussianSet, look_at_camera


def make_camera(width=8, height=8, fx=10.0, eye=(0.0, 0.0, -3.0),
                target=(0.0, 0.0, 0.0), near=0.1, far=20.0):
    return look_at_camera(eye=eye, target=target, up=(0.0, 1.0, 0.0),
                          fx=fx, fy=fx, width=width, height=height,
                          near=near, far=far)


def random_gaussians(rng, n, sh_degree=2, extent=0.8, max_opacity_logit=0.8):
    k = (sh_degree + 1) ** 2
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    sh = rng.normal(0.0, 0.1, size=(n, k, 3))
    sh[:, 0, :] = rng.normal(0.2, 0.5, size=(n, 3))
    return GaussianSet(
        positions=rng.uniform(-extent, extent, size=(n, 3)),
        rotations=quats,
        log_scales=rng.uniform(np.log(0.08), np.log(0.4), size=(n, 3)),
        opacity_logits=rng.uniform(-1.2, max_opacity_logit, size=n),
        sh_coeffs=sh,
    )


def random_scene(seed, n=None, width=8, height=8, sh_degree=2):
    rng = np.random.default_rng(seed)
    if n is None:
        n = int(rng.integers(3, 9))
    gs = random_gaussians(rng, n, sh_degree=sh_degree)
    cam = make_camera(width=width, height=height)
    return gs, cam


def finite_diff(f, x, h=1e-5):
    """Central finite differences of scalar f over the flat array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(analytic, fd, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    return np.abs(analytic - fd) / scale
