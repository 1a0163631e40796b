"""Differentiable forward rendering of a Gaussian set and the hand-written
backward pass.

Blending semantics per pixel, front to back over depth-sorted splats:

    alpha_i = min(0.999, opacity_i * exp(-0.5 d^T C_i^-1 d))
    c(p)   += color_i * alpha_i * T,   T *= (1 - alpha_i)

where d = mean2d_i - p, C_i is the projected 2x2 covariance plus a constant
0.3 px^2 diagonal regularizer, and blending for a pixel stops once
T < 1e-4. A splat contributes only inside its 3-sigma bounding square.

Two render paths exist: a tiled path (16x16 tiles, vectorized, optionally
threaded over tiles) and a per-pixel scalar reference path. They perform
the same arithmetic in the same per-pixel order and must agree bit for bit;
the tests assert this.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .errors import ContractError
from .scene import (
    Camera,
    GaussianSet,
    covariance_3d_backward,
    covariance_3d_batch,
    eval_sh_colors,
    eval_sh_colors_backward,
    sigmoid,
)

ALPHA_CLAMP = 0.999
T_STOP = 1e-4
COV2D_REG = 0.3
RADIUS_SIGMAS = 3.0
ALPHA_SUPPORT_EPS = 1.0 / 255.0
GUARD_BAND = 0.3
TILE_SIZE = 16
LOW_RES_FACTORS = (1, 2, 4, 8)


def _ordered_sum_axis0(arr: np.ndarray) -> np.ndarray:
    """Sum over axis 0 accumulating strictly in index order.

    np.add.reduce iterates the outer (reduction) axis sequentially for
    multidimensional inputs, which matches a front-to-back accumulation
    loop bit for bit; a unit test pins this behaviour.
    """
    if len(arr) == 0:
        return np.zeros(arr.shape[1:], dtype=arr.dtype)
    return np.add.reduce(arr, axis=0)


# ---------------------------------------------------------------------------
# Projection

@dataclass
class Splat2D:
    """One projected splat (test/inspection view of the internal arrays)."""

    mean2d: np.ndarray
    cov2d: np.ndarray          # 2x2, includes the diagonal regularizer
    depth: float
    color: np.ndarray
    alpha_base: float
    source_index: int


@dataclass
class GradAccumulator:
    """Per-Gaussian densification statistics, updated by backward passes.

    ``grad_norm_sum`` accumulates || dL/dmean2d || expressed per unit of
    half the image diagonal, making low-res and full-res phases comparable.
    ``grad3d_sum`` keeps the accumulated world-space positional gradient,
    which supplies the offset direction when a splat is cloned.
    """

    grad_norm_sum: np.ndarray
    count: np.ndarray
    max_radius_px: np.ndarray
    grad3d_sum: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradAccumulator":
        return cls(
            grad_norm_sum=np.zeros(n),
            count=np.zeros(n, dtype=np.int64),
            max_radius_px=np.zeros(n),
            grad3d_sum=np.zeros((n, 3)),
        )

    def __len__(self) -> int:
        return len(self.grad_norm_sum)

    def reset(self) -> None:
        self.grad_norm_sum[:] = 0.0
        self.count[:] = 0
        self.max_radius_px[:] = 0.0
        self.grad3d_sum[:] = 0.0

    def mean_grads(self) -> np.ndarray:
        return self.grad_norm_sum / np.maximum(self.count, 1)


@dataclass
class _Projected:
    """Culled, depth-sorted splat arrays plus backward intermediates.

    ``radius_xy`` is the per-axis support half-width in pixels: the splat
    contributes only inside |d| <= radius_xy componentwise. The support is
    where alpha could exceed 1/255, capped at 3 sigma of the marginals, so
    dim splats get small boxes and invisible tails are skipped everywhere
    (all render paths share this rule).
    """

    source_index: np.ndarray   # (M,)
    t_cam: np.ndarray          # (M, 3)
    mean2d: np.ndarray         # (M, 2)
    cov_abc: np.ndarray        # (M, 3) upper-tri entries incl. regularizer
    inv_abc: np.ndarray        # (M, 3) inverse entries
    radius_xy: np.ndarray      # (M, 2)
    radius: np.ndarray         # (M,) max of the two, for stats/pruning
    depth: np.ndarray          # (M,)
    alpha_base: np.ndarray     # (M,)
    colors: np.ndarray         # (M, 3)
    view_dirs: np.ndarray      # (M, 3)
    view_dist: np.ndarray      # (M,)
    sigma3: np.ndarray         # (M, 3, 3)
    m_mat: np.ndarray          # (M, 2, 3) = J @ R_wc

    def __len__(self) -> int:
        return len(self.source_index)


def _project_sorted(gs: GaussianSet, cam: Camera) -> _Projected:
    n = len(gs)
    if n == 0:
        empty = lambda *s: np.zeros(s)
        return _Projected(
            source_index=np.zeros(0, dtype=np.int64), t_cam=empty(0, 3),
            mean2d=empty(0, 2), cov_abc=empty(0, 3), inv_abc=empty(0, 3),
            radius_xy=empty(0, 2), radius=empty(0), depth=empty(0),
            alpha_base=empty(0), colors=empty(0, 3), view_dirs=empty(0, 3),
            view_dist=empty(0), sigma3=empty(0, 3, 3), m_mat=empty(0, 2, 3))

    t = gs.positions @ cam.R.T + cam.t
    tz = t[:, 2]
    keep = (tz > cam.near) & (tz < cam.far)
    mx = cam.fx * t[:, 0] / np.where(keep, tz, 1.0) + cam.cx
    my = cam.fy * t[:, 1] / np.where(keep, tz, 1.0) + cam.cy
    gx, gy = GUARD_BAND * cam.width, GUARD_BAND * cam.height
    keep &= (mx > -gx) & (mx < cam.width + gx)
    keep &= (my > -gy) & (my < cam.height + gy)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return _project_sorted(GaussianSet(
            positions=np.zeros((0, 3)), rotations=np.zeros((0, 4)),
            log_scales=np.zeros((0, 3)), opacity_logits=np.zeros(0),
            sh_coeffs=np.zeros((0, gs.sh_coeffs.shape[1], 3))), cam)

    t = t[idx]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    mean2d = np.stack([mx[idx], my[idx]], axis=1)

    sigma3 = covariance_3d_batch(gs.rotations[idx], gs.log_scales[idx])
    m = len(idx)
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * tx / (tz * tz)
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * ty / (tz * tz)
    m_mat = np.einsum("nij,jk->nik", J, cam.R)
    cov2d = np.einsum("nij,njk,nlk->nil", m_mat, sigma3, m_mat)
    a = cov2d[:, 0, 0] + COV2D_REG
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + COV2D_REG
    det = a * c - b * b
    inv_abc = np.stack([c / det, -b / det, a / det], axis=1)

    d = gs.positions[idx] - cam.center
    dist = np.linalg.norm(d, axis=1)
    view_dirs = d / dist[:, None]
    colors = eval_sh_colors(gs.sh_coeffs[idx], view_dirs)
    alpha_base = sigmoid(gs.opacity_logits[idx])

    # support: pixels where alpha could reach 1/255, capped at 3 sigma of
    # the marginal variances (a, c); dim splats get zero support
    q_cut = np.minimum(RADIUS_SIGMAS ** 2,
                       2.0 * np.log(np.maximum(alpha_base / ALPHA_SUPPORT_EPS,
                                               1e-12)))
    q_cut = np.maximum(q_cut, 0.0)
    radius_xy = np.sqrt(q_cut)[:, None] * np.sqrt(np.stack([a, c], axis=1))
    radius = radius_xy.max(axis=1)

    # front-to-back order; equal depths tie-break by source index ascending
    order = np.lexsort((idx, tz))
    sel = lambda arr: arr[order]
    return _Projected(
        source_index=idx[order].astype(np.int64),
        t_cam=sel(t), mean2d=sel(mean2d),
        cov_abc=sel(np.stack([a, b, c], axis=1)),
        inv_abc=sel(inv_abc), radius_xy=sel(radius_xy), radius=sel(radius),
        depth=sel(tz), alpha_base=sel(alpha_base), colors=sel(colors),
        view_dirs=sel(view_dirs), view_dist=sel(dist),
        sigma3=sel(sigma3), m_mat=sel(m_mat))


def project(gs: GaussianSet, cam: Camera) -> List[Splat2D]:
    """Project Gaussians to 2D splats (frustum-culled, unsorted order by
    source index). ``cov2d`` already contains the diagonal regularizer."""
    p = _project_sorted(gs, cam)
    by_src = np.argsort(p.source_index, kind="stable")
    out = []
    for i in by_src:
        abc = p.cov_abc[i]
        out.append(Splat2D(
            mean2d=p.mean2d[i].copy(),
            cov2d=np.array([[abc[0], abc[1]], [abc[1], abc[2]]]),
            depth=float(p.depth[i]),
            color=p.colors[i].copy(),
            alpha_base=float(p.alpha_base[i]),
            source_index=int(p.source_index[i]),
        ))
    return out


# ---------------------------------------------------------------------------
# Tiled forward

@dataclass
class _Tile:
    y0: int
    y1: int
    x0: int
    x1: int
    splats: np.ndarray  # indices into the sorted projected arrays


@dataclass
class RenderTape:
    cam: Camera
    factor: int
    n_gaussians: int
    proj: _Projected
    tiles: List[_Tile]
    colors_aff: Optional[np.ndarray]
    # per-gaussian parameter slices for the backward chain
    rotations: np.ndarray
    log_scales: np.ndarray
    sh_coeffs: np.ndarray
    opacity_logits: np.ndarray
    # optional forward-pass (alpha, gaussian) matrices per tile, reused by
    # the backward pass to avoid recomputing them
    tile_cache: Optional[List[tuple]] = None
    # per-splat bbox slices (y0, y1, x0, x1, a, g) from the sweep path
    sweep_cache: Optional[list] = None


@dataclass
class RenderOutput:
    image: np.ndarray                 # (H, W, 3) raw colors
    alpha_map: np.ndarray             # (H, W)
    tape: RenderTape
    image_aff: Optional[np.ndarray] = None
    per_pixel_depth: Optional[np.ndarray] = None


@dataclass
class GaussianGrads:
    """dLoss/dparameter for every Gaussian (zeros for non-contributors)."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    # per-splat extras for callers that chain further (appearance):
    splat_color_raw: np.ndarray = None
    splat_color_aff: np.ndarray = None

    @classmethod
    def zeros_like(cls, gs: GaussianSet) -> "GaussianGrads":
        return cls(
            positions=np.zeros_like(gs.positions),
            rotations=np.zeros_like(gs.rotations),
            log_scales=np.zeros_like(gs.log_scales),
            opacity_logits=np.zeros_like(gs.opacity_logits),
            sh_coeffs=np.zeros_like(gs.sh_coeffs),
        )


def _make_tiles(proj: _Projected, width: int, height: int,
                tile_size: int) -> List[_Tile]:
    tiles = []
    m = len(proj)
    if m:
        rx = proj.radius_xy[:, 0]
        ry = proj.radius_xy[:, 1]
        x0 = np.clip(np.floor(proj.mean2d[:, 0] - rx), 0, width).astype(int)
        x1 = np.clip(np.ceil(proj.mean2d[:, 0] + rx) + 1, 0, width).astype(int)
        y0 = np.clip(np.floor(proj.mean2d[:, 1] - ry), 0, height).astype(int)
        y1 = np.clip(np.ceil(proj.mean2d[:, 1] + ry) + 1, 0, height).astype(int)
    for ty in range(0, height, tile_size):
        for tx in range(0, width, tile_size):
            ty1 = min(ty + tile_size, height)
            tx1 = min(tx + tile_size, width)
            if m:
                hit = (x0 < tx1) & (x1 > tx) & (y0 < ty1) & (y1 > ty)
                splats = np.flatnonzero(hit)
            else:
                splats = np.zeros(0, dtype=np.int64)
            tiles.append(_Tile(ty, ty1, tx, tx1, splats))
    return tiles


def _tile_alpha(proj: _Projected, tile: _Tile):
    """Per-splat alpha over the tile's pixels: arrays (k, P)."""
    k = len(tile.splats)
    ys = np.arange(tile.y0, tile.y1, dtype=np.float64)
    xs = np.arange(tile.x0, tile.x1, dtype=np.float64)
    px = np.tile(xs, len(ys))
    py = np.repeat(ys, len(xs))
    s = tile.splats
    dx = proj.mean2d[s, 0][:, None] - px[None, :]
    dy = proj.mean2d[s, 1][:, None] - py[None, :]
    rx = proj.radius_xy[s, 0][:, None]
    ry = proj.radius_xy[s, 1][:, None]
    covered = (np.abs(dx) <= rx) & (np.abs(dy) <= ry)
    ia = proj.inv_abc[s, 0][:, None]
    ib = proj.inv_abc[s, 1][:, None]
    ic = proj.inv_abc[s, 2][:, None]
    q = ia * (dx * dx) + (2.0 * ib) * (dx * dy) + ic * (dy * dy)
    g = np.exp(-0.5 * q)
    a_raw = proj.alpha_base[s][:, None] * g
    a = np.minimum(a_raw, ALPHA_CLAMP)
    a = np.where(covered, a, 0.0)
    return a, a_raw, g, covered, dx, dy


def _tile_transmittance(a: np.ndarray):
    """T_before (k, P), active mask, and surviving transmittance (P,)."""
    k, npix = a.shape
    t_cum = np.cumprod(1.0 - a, axis=0)
    t_before = np.vstack([np.ones((1, npix)), t_cum[:-1]]) if k else np.ones((0, npix))
    active = t_before >= T_STOP
    n_active = active.sum(axis=0)
    t_ext = np.vstack([np.ones((1, npix)), t_cum])
    t_surv = t_ext[n_active, np.arange(npix)]
    return t_before, active, t_surv


def _forward_tile(proj, tile, colors_aff, want_depth):
    a, _, g, _, _, _ = _tile_alpha(proj, tile)
    t_before, active, t_surv = _tile_transmittance(a)
    w = a * t_before * active
    s = tile.splats
    h, wd = tile.y1 - tile.y0, tile.x1 - tile.x0
    img = _ordered_sum_axis0(w[:, :, None] * proj.colors[s][:, None, :])
    out = {
        "img": img.reshape(h, wd, 3),
        "alpha": (1.0 - t_surv).reshape(h, wd),
        "cache": (a, g),
    }
    if colors_aff is not None:
        img_aff = _ordered_sum_axis0(w[:, :, None] * colors_aff[s][:, None, :])
        out["img_aff"] = img_aff.reshape(h, wd, 3)
    if want_depth:
        out["depth"] = _ordered_sum_axis0(w * proj.depth[s][:, None]).reshape(h, wd)
    return out


def _splat_bbox(proj, i, width, height):
    """Integer pixel range covered by splat i: exactly |d| <= radius_xy."""
    mx, my = proj.mean2d[i]
    rx, ry = proj.radius_xy[i]
    x0 = max(int(np.ceil(mx - rx)), 0)
    x1 = min(int(np.floor(mx + rx)) + 1, width)
    y0 = max(int(np.ceil(my - ry)), 0)
    y1 = min(int(np.floor(my + ry)) + 1, height)
    return y0, y1, x0, x1


def _sweep_forward(proj, width, height, colors_aff, want_depth):
    """Front-to-back per-splat sweep over bbox slices.

    Performs the same per-pixel arithmetic in the same order as the tiled
    and scalar paths, touching only covered pixels. Splats whose whole bbox
    is already saturated (T < stop) are skipped; they would contribute
    exact zeros.
    """
    image = np.zeros((height, width, 3))
    image_aff = np.zeros((height, width, 3)) if colors_aff is not None else None
    depth_map = np.zeros((height, width)) if want_depth else None
    t_img = np.ones((height, width))
    xs_full = np.arange(width, dtype=np.float64)
    ys_full = np.arange(height, dtype=np.float64)
    mean2d = proj.mean2d
    inv_abc = proj.inv_abc
    alpha_base = proj.alpha_base
    colors = proj.colors
    cache = []
    for i in range(len(proj)):
        y0, y1, x0, x1 = _splat_bbox(proj, i, width, height)
        if y0 >= y1 or x0 >= x1:
            cache.append(None)
            continue
        sl = (slice(y0, y1), slice(x0, x1))
        t_before = t_img[sl]
        active = t_before >= T_STOP
        if not active.any():
            cache.append((y0, y1, x0, x1, None, None, None))
            continue
        dx = mean2d[i, 0] - xs_full[x0:x1][None, :]
        dy = mean2d[i, 1] - ys_full[y0:y1][:, None]
        ia, ib, ic = inv_abc[i]
        q = ia * (dx * dx) + (2.0 * ib) * (dx * dy) + ic * (dy * dy)
        g = np.exp(-0.5 * q)
        a = np.minimum(alpha_base[i] * g, ALPHA_CLAMP)
        w = a * t_before * active
        image[sl] += w[:, :, None] * colors[i]
        if image_aff is not None:
            image_aff[sl] += w[:, :, None] * colors_aff[i]
        if want_depth:
            depth_map[sl] += w * proj.depth[i]
        t_stored = t_before.copy()
        t_img[sl] = t_before * (1.0 - a * active)
        cache.append((y0, y1, x0, x1, a, g, t_stored))
    return image, 1.0 - t_img, image_aff, depth_map, cache


def render(gs: GaussianSet, cam: Camera, factor: int = 1,
           appearance_fn: Optional[Callable] = None,
           want_depth: bool = False, tile_size: int = TILE_SIZE,
           threads: int = 1, force_tiled: bool = False) -> RenderOutput:
    """Render the Gaussian set through ``cam``.

    ``factor`` selects low-res mode: the image is (H/f, W/f) with intrinsics
    scaled by 1/f; factor 1 is the full-res path (same code). If
    ``appearance_fn`` is given it maps (colors (M,3), source_index (M,)) to
    per-splat affine colors, and the output carries a second image blended
    from those colors with identical weights.

    Serially the per-splat sweep runs; with ``threads > 1`` (or
    ``force_tiled``) the 16x16-tiled path is used, parallelized over tiles.
    All paths produce bit-identical output (asserted in tests).
    """
    if factor not in LOW_RES_FACTORS:
        raise ContractError(f"low-res factor must be one of {LOW_RES_FACTORS}")
    rcam = cam.scaled(factor)
    proj = _project_sorted(gs, rcam)
    colors_aff = None
    if appearance_fn is not None:
        colors_aff = np.asarray(appearance_fn(proj.colors, proj.source_index),
                                dtype=np.float64)
        if colors_aff.shape != proj.colors.shape:
            raise ContractError("appearance_fn returned wrong shape")
    tiles = _make_tiles(proj, rcam.width, rcam.height, tile_size)
    h, w = rcam.height, rcam.width
    tile_cache = None
    sweep_cache = None

    if force_tiled or threads > 1:
        image = np.zeros((h, w, 3))
        alpha = np.zeros((h, w))
        image_aff = np.zeros((h, w, 3)) if colors_aff is not None else None
        depth_map = np.zeros((h, w)) if want_depth else None

        def run_tile(tile):
            return _forward_tile(proj, tile, colors_aff, want_depth)

        if threads > 1 and len(tiles) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(run_tile, tiles))
        else:
            results = [run_tile(t) for t in tiles]
        tile_cache = []
        for tile, res in zip(tiles, results):
            sl = (slice(tile.y0, tile.y1), slice(tile.x0, tile.x1))
            image[sl] = res["img"]
            alpha[sl] = res["alpha"]
            tile_cache.append(res["cache"])
            if image_aff is not None:
                image_aff[sl] = res["img_aff"]
            if want_depth:
                depth_map[sl] = res["depth"]
    else:
        image, alpha, image_aff, depth_map, sweep_cache = _sweep_forward(
            proj, w, h, colors_aff, want_depth)

    tape = RenderTape(
        cam=rcam, factor=factor, n_gaussians=len(gs), proj=proj, tiles=tiles,
        colors_aff=colors_aff, rotations=gs.rotations[proj.source_index],
        log_scales=gs.log_scales[proj.source_index],
        sh_coeffs=gs.sh_coeffs[proj.source_index],
        opacity_logits=gs.opacity_logits[proj.source_index],
        tile_cache=tile_cache, sweep_cache=sweep_cache)
    return RenderOutput(image=image, alpha_map=alpha, tape=tape,
                        image_aff=image_aff, per_pixel_depth=depth_map)


# ---------------------------------------------------------------------------
# Scalar reference path

def render_reference(gs: GaussianSet, cam: Camera, factor: int = 1,
                     appearance_fn: Optional[Callable] = None,
                     want_depth: bool = False) -> RenderOutput:
    """Per-pixel reference renderer; must agree bit for bit with the tiled
    path. Kept simple and slow on purpose."""
    if factor not in LOW_RES_FACTORS:
        raise ContractError(f"low-res factor must be one of {LOW_RES_FACTORS}")
    rcam = cam.scaled(factor)
    proj = _project_sorted(gs, rcam)
    colors_aff = None
    if appearance_fn is not None:
        colors_aff = np.asarray(appearance_fn(proj.colors, proj.source_index),
                                dtype=np.float64)
    h, w = rcam.height, rcam.width
    image = np.zeros((h, w, 3))
    alpha = np.zeros((h, w))
    image_aff = np.zeros((h, w, 3)) if colors_aff is not None else None
    depth_map = np.zeros((h, w)) if want_depth else None
    m = len(proj)
    for yi in range(h):
        for xi in range(w):
            px = np.float64(xi)
            py = np.float64(yi)
            t = np.float64(1.0)
            for i in range(m):
                dx = proj.mean2d[i, 0] - px
                dy = proj.mean2d[i, 1] - py
                rx, ry = proj.radius_xy[i]
                if not (np.abs(dx) <= rx and np.abs(dy) <= ry):
                    continue
                if t < T_STOP:
                    break
                ia, ib, ic = proj.inv_abc[i]
                q = ia * (dx * dx) + (2.0 * ib) * (dx * dy) + ic * (dy * dy)
                g = np.exp(-0.5 * q)
                a = proj.alpha_base[i] * g
                a = np.minimum(a, ALPHA_CLAMP)
                wgt = a * t
                image[yi, xi] += wgt * proj.colors[i]
                if image_aff is not None:
                    image_aff[yi, xi] += wgt * colors_aff[i]
                if want_depth:
                    depth_map[yi, xi] += wgt * proj.depth[i]
                t = t * (1.0 - a)
            alpha[yi, xi] = 1.0 - t
    tape = RenderTape(
        cam=rcam, factor=factor, n_gaussians=len(gs), proj=proj,
        tiles=_make_tiles(proj, rcam.width, rcam.height, TILE_SIZE),
        colors_aff=colors_aff, rotations=gs.rotations[proj.source_index],
        log_scales=gs.log_scales[proj.source_index],
        sh_coeffs=gs.sh_coeffs[proj.source_index],
        opacity_logits=gs.opacity_logits[proj.source_index])
    return RenderOutput(image=image, alpha_map=alpha, tape=tape,
                        image_aff=image_aff, per_pixel_depth=depth_map)


# ---------------------------------------------------------------------------
# Backward

@dataclass
class BlendGrads:
    """Per-splat gradients of the blending stage (sorted-splat order)."""

    d_color: np.ndarray        # (M, 3) from the raw image
    d_color_aff: Optional[np.ndarray]  # (M, 3) from the affine image
    d_mean2d: np.ndarray       # (M, 2)
    d_cov_full: np.ndarray     # (M, 2, 2) gradient w.r.t. regularized cov2d
    d_alpha_base: np.ndarray   # (M,)
    contributed: np.ndarray    # (M,) bool


def _backward_tile(proj, tile, d_img, d_img_aff, colors_aff, cache=None):
    if cache is not None:
        a, g = cache
        s = tile.splats
        ys = np.arange(tile.y0, tile.y1, dtype=np.float64)
        xs = np.arange(tile.x0, tile.x1, dtype=np.float64)
        px = np.tile(xs, len(ys))
        py = np.repeat(ys, len(xs))
        dx = proj.mean2d[s, 0][:, None] - px[None, :]
        dy = proj.mean2d[s, 1][:, None] - py[None, :]
        covered = a > 0.0
        not_clamped = a < ALPHA_CLAMP
    else:
        a, a_raw, g, covered, dx, dy = _tile_alpha(proj, tile)
        not_clamped = a_raw < ALPHA_CLAMP
        s = tile.splats
    t_before, active, _ = _tile_transmittance(a)
    w = a * t_before * active

    d_img_t = d_img[tile.y0:tile.y1, tile.x0:tile.x1].reshape(-1, 3)
    gtot = np.einsum("kc,pc->kp", proj.colors[s], d_img_t)
    if d_img_aff is not None:
        d_aff_t = d_img_aff[tile.y0:tile.y1, tile.x0:tile.x1].reshape(-1, 3)
        gtot = gtot + np.einsum("kc,pc->kp", colors_aff[s], d_aff_t)

    wg = w * gtot
    # suffix[i] = sum_{j>i} wg[j]
    if len(s):
        suffix = np.cumsum(wg[::-1], axis=0)[::-1]
        suffix = np.vstack([suffix[1:], np.zeros((1, wg.shape[1]))])
    else:
        suffix = wg
    d_a = active * (t_before * gtot - suffix / (1.0 - a))
    d_a_raw = np.where(covered & not_clamped, d_a, 0.0)
    d_alpha_base = np.einsum("kp,kp->k", d_a_raw, g)
    d_g = d_a_raw * proj.alpha_base[s][:, None]
    d_q = -0.5 * g * d_g
    ia = proj.inv_abc[s, 0][:, None]
    ib = proj.inv_abc[s, 1][:, None]
    ic = proj.inv_abc[s, 2][:, None]
    d_mx = np.einsum("kp->k", d_q * 2.0 * (ia * dx + ib * dy))
    d_my = np.einsum("kp->k", d_q * 2.0 * (ib * dx + ic * dy))
    mxx = np.einsum("kp,kp->k", d_q, dx * dx)
    mxy = np.einsum("kp,kp->k", d_q, dx * dy)
    myy = np.einsum("kp,kp->k", d_q, dy * dy)
    d_color = np.einsum("kp,pc->kc", w, d_img_t)
    d_color_aff = None
    if d_img_aff is not None:
        d_color_aff = np.einsum("kp,pc->kc", w, d_aff_t)
    contributed = np.any(w > 0.0, axis=1)
    return {
        "s": s, "d_color": d_color, "d_color_aff": d_color_aff,
        "d_mean": np.stack([d_mx, d_my], axis=1),
        "mxx": mxx, "mxy": mxy, "myy": myy,
        "d_alpha_base": d_alpha_base, "contributed": contributed,
    }


def _sweep_backward(tape: RenderTape, d_image, d_image_aff,
                    out: "BlendGrads") -> None:
    """Backward over the per-splat bbox slices from the sweep forward."""
    proj = tape.proj
    cache = tape.sweep_cache
    h, w = tape.cam.height, tape.cam.width
    # back to front, maintaining the suffix of blended gradient mass;
    # entry transmittances were stored by the forward sweep
    suffix = np.zeros((h, w))
    mxx = np.zeros(len(cache))
    mxy = np.zeros(len(cache))
    myy = np.zeros(len(cache))
    xs_full = np.arange(w, dtype=np.float64)
    ys_full = np.arange(h, dtype=np.float64)
    for i in range(len(cache) - 1, -1, -1):
        entry = cache[i]
        if entry is None or entry[4] is None:
            continue
        y0, y1, x0, x1, a, g, t_before = entry
        sl = (slice(y0, y1), slice(x0, x1))
        d_sl = d_image[sl]
        gtot = d_sl @ proj.colors[i]
        if d_image_aff is not None:
            d_aff_sl = d_image_aff[sl]
            gtot += d_aff_sl @ tape.colors_aff[i]
        active = t_before >= T_STOP
        wgt = a * t_before
        wgt *= active
        s_sl = suffix[sl]
        d_a = t_before * gtot
        d_a -= s_sl / (1.0 - a)
        d_a *= active
        s_sl += wgt * gtot
        d_a *= a < ALPHA_CLAMP  # subgradient 0 where the clamp engaged
        out.d_alpha_base[i] = np.sum(d_a * g)
        d_q = d_a
        d_q *= g
        d_q *= -0.5 * proj.alpha_base[i]
        dx = proj.mean2d[i, 0] - xs_full[x0:x1][None, :]
        dy = proj.mean2d[i, 1] - ys_full[y0:y1][:, None]
        ia, ib, ic = proj.inv_abc[i]
        qdx = d_q * dx
        qdy = d_q * dy
        sqdx = np.sum(qdx)
        sqdy = np.sum(qdy)
        out.d_mean2d[i, 0] = 2.0 * (ia * sqdx + ib * sqdy)
        out.d_mean2d[i, 1] = 2.0 * (ib * sqdx + ic * sqdy)
        mxx[i] = np.sum(qdx * dx)
        mxy[i] = np.sum(qdx * dy)
        myy[i] = np.sum(qdy * dy)
        out.d_color[i] = np.tensordot(wgt, d_sl, axes=([0, 1], [0, 1]))
        if d_image_aff is not None:
            out.d_color_aff[i] = np.tensordot(wgt, d_aff_sl,
                                              axes=([0, 1], [0, 1]))
        out.contributed[i] = bool(np.any(wgt > 0.0))
    _finalize_cov_grads(proj, out, mxx, mxy, myy)


def _finalize_cov_grads(proj, out, mxx, mxy, myy):
    # q = d^T A d with A = inv(cov); dL/dcov = -A dL/dA A
    m = len(proj)
    ia, ib, ic = proj.inv_abc[:, 0], proj.inv_abc[:, 1], proj.inv_abc[:, 2]
    A = np.empty((m, 2, 2))
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = ia, ib, ib, ic
    dA = np.empty((m, 2, 2))
    dA[:, 0, 0], dA[:, 0, 1], dA[:, 1, 0], dA[:, 1, 1] = mxx, mxy, mxy, myy
    out.d_cov_full = -np.einsum("nij,njk,nkl->nil", A, dA, A)


def blend_backward(tape: RenderTape, d_image: np.ndarray,
                   d_image_aff: Optional[np.ndarray] = None,
                   threads: int = 1) -> BlendGrads:
    """Backward of the alpha-blending stage only (no projection chain)."""
    h, w = tape.cam.height, tape.cam.width
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != (h, w, 3):
        raise ContractError(
            f"d_image shape {d_image.shape} does not match render {(h, w, 3)}")
    if d_image_aff is not None:
        if tape.colors_aff is None:
            raise ContractError("tape has no affine colors but d_image_aff given")
        d_image_aff = np.asarray(d_image_aff, dtype=np.float64)
        if d_image_aff.shape != (h, w, 3):
            raise ContractError("d_image_aff shape mismatch")

    proj = tape.proj
    m = len(proj)
    out = BlendGrads(
        d_color=np.zeros((m, 3)),
        d_color_aff=np.zeros((m, 3)) if d_image_aff is not None else None,
        d_mean2d=np.zeros((m, 2)),
        d_cov_full=np.zeros((m, 2, 2)),
        d_alpha_base=np.zeros(m),
        contributed=np.zeros(m, dtype=bool))

    if tape.sweep_cache is not None:
        _sweep_backward(tape, d_image, d_image_aff, out)
        return out

    def run(pair):
        tile, cache = pair
        return _backward_tile(proj, tile, d_image, d_image_aff,
                              tape.colors_aff, cache=cache)

    caches = tape.tile_cache or [None] * len(tape.tiles)
    pairs = [(t, c) for t, c in zip(tape.tiles, caches) if len(t.splats)]
    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, pairs))
    else:
        results = [run(p) for p in pairs]
    # reduce in fixed tile order so the result is thread-count independent
    mxx = np.zeros(m)
    mxy = np.zeros(m)
    myy = np.zeros(m)
    for res in results:
        s = res["s"]
        out.d_color[s] += res["d_color"]
        if out.d_color_aff is not None:
            out.d_color_aff[s] += res["d_color_aff"]
        out.d_mean2d[s] += res["d_mean"]
        mxx[s] += res["mxx"]
        mxy[s] += res["mxy"]
        myy[s] += res["myy"]
        out.d_alpha_base[s] += res["d_alpha_base"]
        out.contributed[s] |= res["contributed"]

    _finalize_cov_grads(proj, out, mxx, mxy, myy)
    return out


def geometry_color_backward(tape: RenderTape, bg: BlendGrads,
                            d_color_total: np.ndarray) -> GaussianGrads:
    """Chain blending gradients through projection, covariance and SH."""
    proj = tape.proj
    cam = tape.cam
    m = len(proj)
    k_sh = tape.sh_coeffs.shape[1]
    grads = GaussianGrads(
        positions=np.zeros((tape.n_gaussians, 3)),
        rotations=np.zeros((tape.n_gaussians, 4)),
        log_scales=np.zeros((tape.n_gaussians, 3)),
        opacity_logits=np.zeros(tape.n_gaussians),
        sh_coeffs=np.zeros((tape.n_gaussians, k_sh, 3)),
        splat_color_raw=bg.d_color,
        splat_color_aff=bg.d_color_aff)
    if m == 0:
        return grads

    tx, ty, tz = proj.t_cam[:, 0], proj.t_cam[:, 1], proj.t_cam[:, 2]
    d_t = np.zeros((m, 3))

    # mean2d = (fx tx / tz + cx, fy ty / tz + cy)
    dmx, dmy = bg.d_mean2d[:, 0], bg.d_mean2d[:, 1]
    d_t[:, 0] += dmx * cam.fx / tz
    d_t[:, 1] += dmy * cam.fy / tz
    d_t[:, 2] += -dmx * cam.fx * tx / (tz * tz) - dmy * cam.fy * ty / (tz * tz)

    # cov2d = M Sigma3 M^T + const, M = J @ R_wc
    d_cov = bg.d_cov_full
    d_cov_sym = 0.5 * (d_cov + np.swapaxes(d_cov, -1, -2))
    d_m_mat = 2.0 * np.einsum("nij,njk,nkl->nil", d_cov_sym, proj.m_mat, proj.sigma3)
    d_sigma3 = np.einsum("nji,njk,nkl->nil", proj.m_mat, d_cov_sym, proj.m_mat)
    d_J = np.einsum("nij,kj->nik", d_m_mat, cam.R)
    tz2 = tz * tz
    d_t[:, 0] += d_J[:, 0, 2] * (-cam.fx / tz2)
    d_t[:, 1] += d_J[:, 1, 2] * (-cam.fy / tz2)
    d_t[:, 2] += (d_J[:, 0, 0] * (-cam.fx / tz2)
                  + d_J[:, 0, 2] * (2.0 * cam.fx * tx / (tz2 * tz))
                  + d_J[:, 1, 1] * (-cam.fy / tz2)
                  + d_J[:, 1, 2] * (2.0 * cam.fy * ty / (tz2 * tz)))

    d_quat, d_log_scale = covariance_3d_backward(
        tape.rotations, tape.log_scales, d_sigma3)

    # colors: SH and view-direction path
    d_color_total = np.asarray(d_color_total, dtype=np.float64)
    d_sh, d_dir = eval_sh_colors_backward(
        tape.sh_coeffs, proj.view_dirs, d_color_total)
    v = proj.view_dirs
    d_pos_dir = (d_dir - v * np.sum(d_dir * v, axis=1, keepdims=True)) \
        / proj.view_dist[:, None]

    d_pos = d_t @ cam.R + d_pos_dir

    ab = proj.alpha_base
    d_logit = bg.d_alpha_base * ab * (1.0 - ab)

    src = proj.source_index
    grads.positions[src] = d_pos
    grads.rotations[src] = d_quat
    grads.log_scales[src] = d_log_scale
    grads.opacity_logits[src] = d_logit
    grads.sh_coeffs[src] = d_sh
    return grads


def render_backward(tape: RenderTape, d_image: np.ndarray,
                    accum: Optional[GradAccumulator] = None,
                    threads: int = 1) -> GaussianGrads:
    """Full backward pass: gradients for every Gaussian parameter.

    If ``accum`` is given, contributing splats get their screen-space
    positional gradient statistic accumulated (see GradAccumulator).
    """
    bg = blend_backward(tape, d_image, threads=threads)
    grads = geometry_color_backward(tape, bg, bg.d_color)
    if accum is not None:
        update_accumulator(accum, tape, bg, position_grads=grads.positions)
    return grads


def update_accumulator(accum: GradAccumulator, tape: RenderTape,
                       bg: BlendGrads,
                       position_grads: Optional[np.ndarray] = None) -> None:
    if len(accum) != tape.n_gaussians:
        raise ContractError("accumulator size does not match gaussian count")
    proj = tape.proj
    mask = bg.contributed
    if not np.any(mask):
        return
    half_diag = 0.5 * math.hypot(tape.cam.width, tape.cam.height)
    norms = np.linalg.norm(bg.d_mean2d[mask], axis=1) * half_diag
    src = proj.source_index[mask]
    accum.grad_norm_sum[src] += norms
    accum.count[src] += 1
    accum.max_radius_px[src] = np.maximum(
        accum.max_radius_px[src], proj.radius[mask])
    if position_grads is not None:
        accum.grad3d_sum[src] += position_grads[src]
