"""Illumination modeling: per-image and per-Gaussian embeddings feeding a
three-layer affine MLP that scales/shifts each splat's color before
blending. At initialization the head emits exactly (alpha=1, beta=0), so
the affine render is bit-identical to the raw render until the appearance
parameters receive updates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import sparse

from .errors import ContractError
from .optim import SmallMlp
from .rasterizer import RenderTape, _tile_alpha, _tile_transmittance, render
from .scene import GaussianSet
from .ssim import dssim_map, ssim_map_backward

LAMBDA_DSSIM = 0.2


@dataclass
class ImageEmbeddingTable:
    """One embedding row per training image; fresh rows for test views."""

    table: np.ndarray  # (n_images, dim)

    @classmethod
    def create(cls, n_images: int, dim: int,
               rng: np.random.Generator) -> "ImageEmbeddingTable":
        return cls(table=rng.normal(0.0, 0.01, size=(n_images, dim)))

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def mean_row(self) -> np.ndarray:
        return self.table.mean(axis=0)


def fourier_embed(positions: np.ndarray, bands: int, out_dim: int,
                  bbox_min, bbox_max) -> np.ndarray:
    """Positional encoding of points, zero-padded to ``out_dim``.

    sin/cos of 2^k * pi * x per axis for k < bands on positions normalized
    to [0, 1] within the scene bounding box; requires 6*bands <= out_dim.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if 6 * bands > out_dim:
        raise ContractError("fourier bands exceed embedding dimension")
    span = np.maximum(np.asarray(bbox_max, dtype=np.float64)
                      - np.asarray(bbox_min, dtype=np.float64), 1e-12)
    x = (positions - np.asarray(bbox_min, dtype=np.float64)) / span
    out = np.zeros((len(positions), out_dim))
    col = 0
    for k in range(bands):
        arg = (2.0 ** k) * np.pi * x
        out[:, col:col + 3] = np.sin(arg)
        out[:, col + 3:col + 6] = np.cos(arg)
        col += 6
    return out


@dataclass
class AppearanceModel:
    """Affine-coefficient MLP over (color, image embedding, splat embedding)."""

    mlp: SmallMlp
    image_dim: int
    gaussian_dim: int

    @classmethod
    def create(cls, image_dim: int, gaussian_dim: int, hidden: int,
               rng: np.random.Generator) -> "AppearanceModel":
        mlp = SmallMlp.create([3 + image_dim + gaussian_dim, hidden, hidden, 6],
                              head="affine", rng=rng)
        return cls(mlp=mlp, image_dim=image_dim, gaussian_dim=gaussian_dim)

    def _inputs(self, colors, f_img, f_gs):
        colors = np.asarray(colors, dtype=np.float64)
        f_gs = np.asarray(f_gs, dtype=np.float64)
        if colors.shape[0] != f_gs.shape[0]:
            raise ContractError("colors/embeddings row mismatch")
        if f_gs.shape[1] != self.gaussian_dim:
            raise ContractError("gaussian embedding dim mismatch")
        f_img = np.asarray(f_img, dtype=np.float64).reshape(-1)
        if f_img.size != self.image_dim:
            raise ContractError("image embedding dim mismatch")
        rep = np.broadcast_to(f_img, (colors.shape[0], f_img.size))
        return np.concatenate([colors, rep, f_gs], axis=1)

    def coeffs(self, colors, f_img, f_gs):
        """(alpha, beta) per row plus the MLP tape."""
        x = self._inputs(colors, f_img, f_gs)
        (alpha, beta), backward = self.mlp.forward_backward(x)
        return alpha, beta, backward


def affine_coeffs(model: AppearanceModel, color, f_img, f_gs):
    """Coefficients for a single color/embedding triple."""
    alpha, beta, _ = model.coeffs(np.atleast_2d(color), f_img,
                                  np.atleast_2d(f_gs))
    return alpha[0], beta[0]


def apply_affine(color, alpha, beta):
    """Componentwise alpha * color + beta, clamped at zero like SH colors."""
    return np.maximum(np.asarray(alpha) * np.asarray(color) + np.asarray(beta), 0.0)


def apply_affine_backward(color, alpha, beta, d_out):
    """Gradients (d_color, d_alpha, d_beta) through the clamp."""
    pre = np.asarray(alpha) * np.asarray(color) + np.asarray(beta)
    gate = (pre > 0.0).astype(np.float64)
    d_pre = np.asarray(d_out) * gate
    return d_pre * alpha, d_pre * color, d_pre


# ---------------------------------------------------------------------------
# Photometric loss (masked L1 on the affine render + masked D-SSIM on the
# raw render)

def photometric_loss(c_aff: np.ndarray, c_raw: np.ndarray, c_gt: np.ndarray,
                     mask: np.ndarray, lambda_dssim: float = LAMBDA_DSSIM):
    """Masked reconstruction loss and its image-space gradients.

    Returns (value, d_aff, d_raw): the L1 term (weight 1-lambda) differentiates
    into ``d_aff`` only, the D-SSIM term (weight lambda) into ``d_raw`` only.
    The mask is treated as a constant weight.
    """
    c_aff = np.asarray(c_aff, dtype=np.float64)
    c_raw = np.asarray(c_raw, dtype=np.float64)
    c_gt = np.asarray(c_gt, dtype=np.float64)
    if not (c_aff.shape == c_raw.shape == c_gt.shape):
        raise ContractError("photometric loss images differ in shape")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != c_gt.shape[:2]:
        raise ContractError("mask resolution mismatch")
    n = c_gt.size
    m3 = mask[:, :, None]

    diff = c_aff - c_gt
    l1 = float(np.sum(m3 * np.abs(diff)) / n)
    d_aff = (1.0 - lambda_dssim) * m3 * np.sign(diff) / n

    dmap = dssim_map(c_raw, c_gt)
    l_dssim = float(np.sum(m3 * dmap) / n)
    d_map_up = np.broadcast_to(-lambda_dssim * m3 / (2.0 * n), c_gt.shape)
    d_raw = ssim_map_backward(c_raw, c_gt, d_map_up)

    value = (1.0 - lambda_dssim) * l1 + lambda_dssim * l_dssim
    return value, d_aff, d_raw


# ---------------------------------------------------------------------------
# Test-time embedding fitting

def blend_weight_matrix(tape: RenderTape) -> sparse.csr_matrix:
    """Sparse (H*W, M) blend weights from a render tape.

    With frozen geometry the affine render is linear in per-splat colors:
    image.reshape(-1, 3) = W @ colors.
    """
    h, w = tape.cam.height, tape.cam.width
    rows, cols, vals = [], [], []
    for tile in tape.tiles:
        if not len(tile.splats):
            continue
        a, *_ = _tile_alpha(tape.proj, tile)
        t_before, active, _ = _tile_transmittance(a)
        wgt = a * t_before * active
        ys = np.arange(tile.y0, tile.y1)
        xs = np.arange(tile.x0, tile.x1)
        pix = (ys[:, None] * w + xs[None, :]).reshape(-1)
        k, p = wgt.shape
        nz = wgt > 0.0
        ki, pi = np.nonzero(nz)
        rows.append(pix[pi])
        cols.append(tile.splats[ki])
        vals.append(wgt[ki, pi])
    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
    else:
        rows = cols = vals = np.zeros(0)
    m = len(tape.proj)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(h * w, m))


def region_columns(width: int, region: str) -> slice:
    if region == "left":
        return slice(0, width // 2)
    if region == "right":
        return slice(width // 2, width)
    if region == "full":
        return slice(0, width)
    raise ContractError(f"unknown region {region!r}")


def testtime_fit_embedding(gs: GaussianSet, cam, model: AppearanceModel,
                           emb_init: np.ndarray, test_image: np.ndarray,
                           steps: int = 128, lr: float = 0.01,
                           lambda_dssim: float = LAMBDA_DSSIM,
                           mask: Optional[np.ndarray] = None,
                           region: str = "left") -> np.ndarray:
    """Fit a fresh image embedding on part of a held-out view.

    The scene (Gaussians, MLPs) stays frozen; Adam runs on the masked L1
    term of the photometric loss restricted to ``region``. Geometry is
    rendered once and reused, since only per-splat colors change.
    """
    from .optim import AdamState, adam_step

    if gs.embeddings is None:
        raise ContractError("gaussians carry no appearance embeddings")
    out = render(gs, cam)
    tape = out.tape
    wmat = blend_weight_matrix(tape)
    colors_raw = tape.proj.colors
    f_gs = gs.embeddings[tape.proj.source_index]
    h, w = cam.height, cam.width
    cols = region_columns(w, region)
    region_mask = np.zeros((h, w))
    region_mask[:, cols] = 1.0
    if mask is not None:
        region_mask = region_mask * np.asarray(mask, dtype=np.float64)
    m3 = region_mask[:, :, None]
    n = 3 * h * (cols.stop - cols.start)

    emb = np.asarray(emb_init, dtype=np.float64).copy()
    state = AdamState(lr=lr)
    test_image = np.asarray(test_image, dtype=np.float64)
    for _ in range(steps):
        alpha, beta, backward = model.coeffs(colors_raw, emb, f_gs)
        c_aff_splat = apply_affine(colors_raw, alpha, beta)
        img_aff = (wmat @ c_aff_splat).reshape(h, w, 3)
        diff = img_aff - test_image
        d_img = (1.0 - lambda_dssim) * m3 * np.sign(diff) / n
        d_splat = wmat.T @ d_img.reshape(-1, 3)
        d_color, d_alpha, d_beta = apply_affine_backward(
            colors_raw, alpha, beta, d_splat)
        grads = backward((d_alpha, d_beta))
        d_emb = grads["x"][:, 3:3 + model.image_dim].sum(axis=0)
        (emb,) = adam_step(state, [emb], [d_emb])
    return emb


def fit_global_affine(image: np.ndarray, reference: np.ndarray):
    """Per-channel least-squares (a, b) with image ~ a * reference + b."""
    a = np.zeros(3)
    b = np.zeros(3)
    for ch in range(3):
        x = reference[..., ch].reshape(-1)
        y = image[..., ch].reshape(-1)
        var = np.var(x)
        if var < 1e-12:
            a[ch] = 1.0
            b[ch] = float(np.mean(y) - np.mean(x))
        else:
            a[ch] = float(np.cov(x, y, bias=True)[0, 1] / var)
            b[ch] = float(np.mean(y) - a[ch] * np.mean(x))
    return a, b
