"""Core scene types: Gaussians, cameras, spherical-harmonics color.

Everything here is plain float64 numpy. Gaussian parameters are stored in
unconstrained form (log scales, opacity logits) so positivity and (0,1)
constraints hold by construction. Batched variants operate on a
``GaussianSet`` (struct-of-arrays); the single-splat ``Gaussian3D`` view is
convenient for construction and tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError

# Real SH basis constants, graphics convention.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sh_dim(degree: int) -> int:
    if degree not in (0, 1, 2, 3):
        raise ConfigError(f"SH degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Evaluate the real SH basis at ``dirs`` (..., 3) -> (..., (deg+1)^2).

    The polynomials are evaluated on the raw components, so callers must
    pass unit vectors for the usual orthonormal-basis semantics.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (sh_dim(degree),), dtype=np.float64)
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Partials of every basis function w.r.t. the direction components.

    Returns (..., (deg+1)^2, 3). Free partials of the polynomials: no
    unit-norm projection is applied here.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    g = np.zeros(dirs.shape[:-1] + (sh_dim(degree), 3), dtype=np.float64)
    if degree >= 1:
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, 0] = SH_C2[0] * y
        g[..., 4, 1] = SH_C2[0] * x
        g[..., 5, 1] = SH_C2[1] * z
        g[..., 5, 2] = SH_C2[1] * y
        g[..., 6, 0] = SH_C2[2] * (-2.0 * x)
        g[..., 6, 1] = SH_C2[2] * (-2.0 * y)
        g[..., 6, 2] = SH_C2[2] * (4.0 * z)
        g[..., 7, 0] = SH_C2[3] * z
        g[..., 7, 2] = SH_C2[3] * x
        g[..., 8, 0] = SH_C2[4] * (2.0 * x)
        g[..., 8, 1] = SH_C2[4] * (-2.0 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = SH_C3[0] * 6.0 * x * y
        g[..., 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        g[..., 9, 2] = zero
        g[..., 10, 0] = SH_C3[1] * y * z
        g[..., 10, 1] = SH_C3[1] * x * z
        g[..., 10, 2] = SH_C3[1] * x * y
        g[..., 11, 0] = SH_C3[2] * (-2.0 * x * y)
        g[..., 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[..., 11, 2] = SH_C3[2] * (8.0 * y * z)
        g[..., 12, 0] = SH_C3[3] * (-6.0 * x * z)
        g[..., 12, 1] = SH_C3[3] * (-6.0 * y * z)
        g[..., 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[..., 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[..., 13, 1] = SH_C3[4] * (-2.0 * x * y)
        g[..., 13, 2] = SH_C3[4] * (8.0 * x * z)
        g[..., 14, 0] = SH_C3[5] * (2.0 * x * z)
        g[..., 14, 1] = SH_C3[5] * (-2.0 * y * z)
        g[..., 14, 2] = SH_C3[5] * (xx - yy)
        g[..., 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = SH_C3[6] * (-6.0 * x * y)
        g[..., 15, 2] = zero
    return g


@dataclass(frozen=True)
class ShBasis:
    """SH basis of a fixed degree; wraps :func:`sh_basis`."""

    degree: int

    def __post_init__(self):
        sh_dim(self.degree)  # validates

    @property
    def dim(self) -> int:
        return sh_dim(self.degree)

    def __call__(self, dirs: np.ndarray) -> np.ndarray:
        return sh_basis(self.degree, dirs)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quats(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) wxyz -> rotation matrices (..., 3, 3).

    Input is normalized internally, so raw (post-optimizer) quaternions are
    accepted; the resulting map is what the rasterizer differentiates.
    """
    q = normalize_quats(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def quat_rot_backward(q_raw: np.ndarray, d_R: np.ndarray) -> np.ndarray:
    """Gradient of L w.r.t. raw quaternions given dL/dR.

    Chains through the internal normalization of :func:`quat_to_rot`, so it
    is finite-difference consistent for off-unit inputs.
    """
    q_raw = np.asarray(q_raw, dtype=np.float64)
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    q = q_raw / norm
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dR_dw = 2.0 * mat([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dR_dx = 2.0 * mat([[zero, y, z], [y, -2.0 * x, -w], [z, w, -2.0 * x]])
    dR_dy = 2.0 * mat([[-2.0 * y, x, w], [x, zero, z], [-w, z, -2.0 * y]])
    dR_dz = 2.0 * mat([[-2.0 * z, -w, x], [w, -2.0 * z, y], [x, y, zero]])
    d_unit = np.stack(
        [np.sum(d_R * d, axis=(-2, -1)) for d in (dR_dw, dR_dx, dR_dy, dR_dz)],
        axis=-1,
    )
    # d qhat / d q_raw = (I - qhat qhat^T) / |q_raw|
    proj = d_unit - q * np.sum(d_unit * q, axis=-1, keepdims=True)
    return proj / norm


@dataclass
class Gaussian3D:
    """One anisotropic splat.

    ``exp(log_scale)`` are the per-axis standard deviations in world units;
    opacity is ``sigmoid(opacity_logit)``. ``sh_coeffs`` has shape
    ((degree+1)^2, 3). ``gs_embedding`` is the optional appearance feature.
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray
    gs_embedding: Optional[np.ndarray] = None

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class GaussianSet:
    """Struct-of-arrays container for N splats (the operational form)."""

    positions: np.ndarray      # (N, 3)
    rotations: np.ndarray      # (N, 4) wxyz
    log_scales: np.ndarray     # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh_coeffs: np.ndarray      # (N, K, 3)
    embeddings: Optional[np.ndarray] = None  # (N, D_gs)

    def __post_init__(self):
        n = len(self.positions)
        for name in ("rotations", "log_scales", "opacity_logits", "sh_coeffs"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"GaussianSet field {name} has wrong length")
        if self.embeddings is not None and len(self.embeddings) != n:
            raise ConfigError("GaussianSet embeddings have wrong length")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def sh_degree(self) -> int:
        k = self.sh_coeffs.shape[1]
        deg = int(round(np.sqrt(k))) - 1
        if sh_dim(deg) != k:
            raise ConfigError(f"sh_coeffs length {k} is not a valid (deg+1)^2")
        return deg

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def gaussian(self, i: int) -> Gaussian3D:
        emb = None if self.embeddings is None else self.embeddings[i].copy()
        return Gaussian3D(
            position=self.positions[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh_coeffs[i].copy(),
            gs_embedding=emb,
        )

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianSet":
        gs = list(gaussians)
        emb = None
        if gs and gs[0].gs_embedding is not None:
            emb = np.stack([g.gs_embedding for g in gs]).astype(np.float64)
        return cls(
            positions=np.stack([g.position for g in gs]).astype(np.float64),
            rotations=np.stack([g.rotation for g in gs]).astype(np.float64),
            log_scales=np.stack([g.log_scale for g in gs]).astype(np.float64),
            opacity_logits=np.array([g.opacity_logit for g in gs], dtype=np.float64),
            sh_coeffs=np.stack([g.sh_coeffs for g in gs]).astype(np.float64),
            embeddings=emb,
        )

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            embeddings=None if self.embeddings is None else self.embeddings.copy(),
        )

    def renormalize_rotations(self) -> None:
        self.rotations = normalize_quats(self.rotations)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera rigid
    transform (x_cam = R @ x_world + t, OpenCV axes: x right, y down,
    z forward). Pixel (i, j) has center (x=j, y=i)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(repr=False)   # (3, 3)
    t: np.ndarray = field(repr=False)   # (3,)
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ConfigError("camera resolution must be at least 8x8")
        if not (0.0 < self.near < self.far):
            raise ConfigError("camera requires 0 < near < far")
        R = np.asarray(self.R, dtype=np.float64)
        if R.shape != (3, 3):
            raise ConfigError("camera rotation must be 3x3")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-8):
            raise ConfigError("camera rotation must be orthonormal")
        if np.linalg.det(R) < 0:
            raise ConfigError("camera rotation must have determinant +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def scaled(self, factor: int) -> "Camera":
        """Camera for rendering at (H/f, W/f); intrinsics scaled by 1/f.

        The principal point uses the half-pixel-correct rule so a low-res
        pixel center maps onto the mean of the corresponding full-res block.
        """
        if factor == 1:
            return self
        if self.width % factor or self.height % factor:
            raise ConfigError("resolution not divisible by low-res factor")
        return Camera(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx - (factor - 1) / 2.0) / factor,
            cy=(self.cy - (factor - 1) / 2.0) / factor,
            width=self.width // factor,
            height=self.height // factor,
            R=self.R,
            t=self.t,
            near=self.near,
            far=self.far,
        )


def look_at_camera(eye, target, up, fx, fy, width, height,
                   near=0.05, far=100.0) -> Camera:
    """Build a camera at ``eye`` looking at ``target`` (OpenCV convention)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ConfigError("look_at: view direction parallel to up vector")
    right = right / nr
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])  # rows: camera axes in world
    return Camera(fx=fx, fy=fy, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  width=width, height=height, R=R, t=-R @ eye,
                  near=near, far=far)


# ---------------------------------------------------------------------------
# SH color evaluation

def eval_sh_colors(sh_coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Batched view-dependent color: (N, K, 3) coeffs, (N, 3) unit dirs.

    color = clamp(sum_k basis_k(dir) * coeff_k + 0.5, min=0).
    """
    k = sh_coeffs.shape[1]
    deg = int(round(np.sqrt(k))) - 1
    if sh_dim(deg) != k:
        raise ConfigError(f"sh_coeffs length {k} is not a valid (deg+1)^2")
    basis = sh_basis(deg, dirs)  # (N, K)
    pre = np.einsum("nk,nkc->nc", basis, sh_coeffs) + 0.5
    return np.maximum(pre, 0.0)


def eval_sh_colors_backward(sh_coeffs, dirs, d_color):
    """Backward of :func:`eval_sh_colors`.

    Returns (d_sh (N,K,3), d_dir (N,3)). The clamp at zero uses subgradient
    zero below the boundary.
    """
    k = sh_coeffs.shape[1]
    deg = int(round(np.sqrt(k))) - 1
    basis = sh_basis(deg, dirs)
    pre = np.einsum("nk,nkc->nc", basis, sh_coeffs) + 0.5
    d_pre = np.where(pre > 0.0, d_color, 0.0)
    d_sh = basis[:, :, None] * d_pre[:, None, :]
    d_basis = np.einsum("nkc,nc->nk", sh_coeffs, d_pre)
    grad = sh_basis_grad(deg, dirs)  # (N, K, 3)
    d_dir = np.einsum("nk,nkd->nd", d_basis, grad)
    return d_sh, d_dir


def eval_sh_color(g: Gaussian3D, view_dir: np.ndarray) -> np.ndarray:
    """Color of one splat for a unit view direction (see batched form)."""
    view_dir = np.asarray(view_dir, dtype=np.float64)
    return eval_sh_colors(g.sh_coeffs[None], view_dir[None])[0]


# ---------------------------------------------------------------------------
# 3D covariance

def covariance_3d_batch(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Sigma = R diag(exp(2 s)) R^T for each splat; SPD by construction."""
    R = quat_to_rot(rotations)
    v = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    return np.einsum("nij,nj,nkj->nik", R, v, R)


def covariance_3d(g: Gaussian3D) -> np.ndarray:
    return covariance_3d_batch(g.rotation[None], g.log_scale[None])[0]


def covariance_3d_backward(rotations, log_scales, d_sigma):
    """Backward of :func:`covariance_3d_batch` for symmetric upstream
    gradients ``d_sigma`` (N, 3, 3). Returns (d_quat, d_log_scale)."""
    R = quat_to_rot(rotations)
    v = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    d_sym = 0.5 * (d_sigma + np.swapaxes(d_sigma, -1, -2))
    # Sigma = R V R^T with V = diag(v)
    d_R = 2.0 * np.einsum("nij,njk,nk->nik", d_sym, R, v)
    d_v = np.einsum("nji,njk,nki->ni", R, d_sym, R)
    d_log_scale = d_v * 2.0 * v
    d_quat = quat_rot_backward(rotations, d_R)
    return d_quat, d_log_scale
