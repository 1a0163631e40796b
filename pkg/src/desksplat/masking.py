"""Transient mask estimation and its supervision.

A two-layer MLP over per-patch image features predicts a per-pixel soft
mask (1 = static / keep, 0 = transient / drop). It is supervised by three
signals: a feature-cosine target on the feature grid, a residual-derived
inlier map on the image grid, and an exponentially decaying pull toward
all-static. A resolution cascade renders and supervises at low resolution
until densification starts, then switches to full resolution; low-phase
residuals are additionally downsampled by a fixed extra factor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import ConfigError, ContractError, DataError
from .optim import SmallMlp

SPLF_MAGIC = b"SPLF"
SPLF_VERSION = 1
DEFAULT_PATCH_PX = 14
BUILTIN_CHANNELS = 18
RESIDUAL_QUANTILE = 0.7


@dataclass
class FeatureMap:
    grid: np.ndarray          # (Hf, Wf, C)
    patch_size: int
    source_res: Tuple[int, int]  # (H, W) of the image the grid was built from

    @property
    def channels(self) -> int:
        return self.grid.shape[2]


def _box_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 mean over in-bounds neighbours (border-renormalized).

    Uses exact shifted-slice sums so regions of exact zeros stay exactly
    zero; a moving-average filter would leave float dust that corrupts
    quantile thresholds on near-perfect renders.
    """
    h, w = img.shape[:2]
    pad = np.zeros((h + 2, w + 2) + img.shape[2:], dtype=np.float64)
    pad[1:-1, 1:-1] = img
    ones = np.zeros((h + 2, w + 2))
    ones[1:-1, 1:-1] = 1.0
    total = np.zeros_like(np.asarray(img, dtype=np.float64))
    count = np.zeros((h, w))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            total += pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            count += ones[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    if img.ndim == 3:
        count = count[:, :, None]
    return total / count


def _patch_grid_shape(h: int, w: int, patch: int) -> Tuple[int, int]:
    return -(-h // patch), -(-w // patch)


def _patch_means(field: np.ndarray, patch: int) -> np.ndarray:
    """Per-patch means over a ceil grid via integral images.

    Border patches average their in-bounds pixels only.
    """
    h, w = field.shape[:2]
    hf, wf = _patch_grid_shape(h, w, patch)
    integral = np.zeros((h + 1, w + 1) + field.shape[2:])
    integral[1:, 1:] = field.cumsum(axis=0).cumsum(axis=1)
    ys = np.minimum(np.arange(hf + 1) * patch, h)
    xs = np.minimum(np.arange(wf + 1) * patch, w)
    s = (integral[ys[1:, None], xs[None, 1:]]
         - integral[ys[:-1, None], xs[None, 1:]]
         - integral[ys[1:, None], xs[None, :-1]]
         + integral[ys[:-1, None], xs[None, :-1]])
    counts = ((ys[1:] - ys[:-1])[:, None] * (xs[1:] - xs[:-1])[None, :])
    if field.ndim == 3:
        counts = counts[:, :, None]
    return s / counts


class BuiltinFeatureExtractor:
    """Deterministic per-patch descriptor standing in for a backbone.

    Channels (18): patch mean RGB, patch RGB standard deviation, and patch
    means of |dx| and |dy| per channel computed on the image blurred at two
    scales. Patch size is fixed in pixels, so smaller (low-phase) images
    yield coarser grids.
    """

    name = "builtin"

    def __init__(self, patch_px: int = DEFAULT_PATCH_PX,
                 blur_sigmas=(1.0, 2.0)):
        self.patch_px = int(patch_px)
        self.blur_sigmas = tuple(blur_sigmas)

    @property
    def channels(self) -> int:
        return 6 + 6 * len(self.blur_sigmas)

    def extract(self, image: np.ndarray) -> FeatureMap:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ContractError("feature extractor expects an HxWx3 image")
        h, w, _ = image.shape
        p = self.patch_px
        mean = _patch_means(image, p)
        mean_sq = _patch_means(image * image, p)
        std = np.sqrt(np.maximum(mean_sq - mean * mean, 0.0))
        parts = [mean, std]
        for sigma in self.blur_sigmas:
            blurred = gaussian_filter1d(image, sigma, axis=0, mode="nearest")
            blurred = gaussian_filter1d(blurred, sigma, axis=1, mode="nearest")
            gy, gx = np.gradient(blurred, axis=(0, 1))
            parts.append(_patch_means(np.abs(gx), p))
            parts.append(_patch_means(np.abs(gy), p))
        grid = np.concatenate(parts, axis=2)
        return FeatureMap(grid=grid, patch_size=p, source_res=(h, w))


class FileFeatureExtractor:
    """Looks up precomputed feature maps (``<key>.splf``) from a directory.

    Used to feed the mask MLP with externally computed backbone features
    for dataset images; see :func:`read_splf` for the file format.
    """

    name = "files"

    def __init__(self, directory, channels: Optional[int] = None):
        from pathlib import Path

        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise ConfigError(f"feature directory not found: {directory}")
        self._channels = channels
        self._cache = {}

    @property
    def channels(self) -> int:
        if self._channels is None:
            files = sorted(self.directory.glob("*.splf"))
            if not files:
                raise ConfigError(f"no .splf files in {self.directory}")
            self._channels = read_splf(files[0]).channels
        return self._channels

    def extract_named(self, key: str, source_res=None) -> FeatureMap:
        if key not in self._cache:
            path = self.directory / f"{key}.splf"
            if not path.exists():
                raise DataError(f"missing feature file {path}")
            self._cache[key] = read_splf(path, source_res=source_res)
        return self._cache[key]


def write_splf(path, feat: FeatureMap) -> None:
    grid = np.ascontiguousarray(feat.grid, dtype="<f4")
    hf, wf, c = grid.shape
    with open(path, "wb") as f:
        f.write(SPLF_MAGIC)
        f.write(struct.pack("<IIIII", SPLF_VERSION, hf, wf, c, feat.patch_size))
        f.write(grid.tobytes())


def read_splf(path, source_res=None) -> FeatureMap:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SPLF_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        version, hf, wf, c, patch = struct.unpack("<IIIII", f.read(20))
        if version != SPLF_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        data = f.read(hf * wf * c * 4)
        if len(data) != hf * wf * c * 4:
            raise DataError(f"{path}: truncated payload")
    grid = np.frombuffer(data, dtype="<f4").reshape(hf, wf, c).astype(np.float64)
    if source_res is None:
        source_res = (hf * patch, wf * patch)
    return FeatureMap(grid=grid, patch_size=patch, source_res=tuple(source_res))


# ---------------------------------------------------------------------------
# Cell-grid <-> pixel-grid resampling

def _axis_weights(n_out: int, scale: float, patch: float, n_cells: int):
    """Bilinear taps mapping output pixels to cell coordinates.

    Output pixel x sits at image coordinate (x + 0.5) * scale - 0.5; cell j
    has its center at (j + 0.5) * patch - 0.5.
    """
    coord = ((np.arange(n_out) + 0.5) * scale) / patch - 0.5
    coord = np.clip(coord, 0.0, n_cells - 1.0)
    i0 = np.floor(coord).astype(int)
    i0 = np.minimum(i0, n_cells - 1)
    i1 = np.minimum(i0 + 1, n_cells - 1)
    w1 = coord - i0
    return i0, i1, 1.0 - w1, w1


def upsample_cells(cells: np.ndarray, patch: int, out_hw: Tuple[int, int],
                   scale=(1.0, 1.0)) -> np.ndarray:
    """Bilinearly resample a cell grid to a pixel grid.

    ``scale`` is the per-axis (y, x) downsample factor of the output grid
    relative to the source image the cells were computed from.
    """
    sy, sx = (scale, scale) if np.isscalar(scale) else scale
    hf, wf = cells.shape[:2]
    ho, wo = out_hw
    yi0, yi1, wy0, wy1 = _axis_weights(ho, sy, patch, hf)
    xi0, xi1, wx0, wx1 = _axis_weights(wo, sx, patch, wf)
    c00 = cells[np.ix_(yi0, xi0)]
    c01 = cells[np.ix_(yi0, xi1)]
    c10 = cells[np.ix_(yi1, xi0)]
    c11 = cells[np.ix_(yi1, xi1)]
    wy0 = wy0[:, None]
    wy1 = wy1[:, None]
    return (c00 * (wy0 * wx0[None, :]) + c01 * (wy0 * wx1[None, :])
            + c10 * (wy1 * wx0[None, :]) + c11 * (wy1 * wx1[None, :]))


def upsample_cells_transpose(d_out: np.ndarray, patch: int,
                             cells_hw: Tuple[int, int],
                             scale=(1.0, 1.0)) -> np.ndarray:
    """Adjoint of :func:`upsample_cells` (scatter the bilinear weights)."""
    sy, sx = (scale, scale) if np.isscalar(scale) else scale
    hf, wf = cells_hw
    ho, wo = d_out.shape[:2]
    yi0, yi1, wy0, wy1 = _axis_weights(ho, sy, patch, hf)
    xi0, xi1, wx0, wx1 = _axis_weights(wo, sx, patch, wf)
    d_cells = np.zeros((hf, wf))
    # separable scatter: rows then columns
    row_scat = np.zeros((hf, wo))
    np.add.at(row_scat, yi0, d_out * wy0[:, None])
    np.add.at(row_scat, yi1, d_out * wy1[:, None])
    np.add.at(d_cells.T, xi0, (row_scat * wx0[None, :]).T)
    np.add.at(d_cells.T, xi1, (row_scat * wx1[None, :]).T)
    return d_cells


# ---------------------------------------------------------------------------
# Mask model

@dataclass
class MaskModel:
    """Two-layer sigmoid-head MLP over feature cells."""

    mlp: SmallMlp

    @classmethod
    def create(cls, channels: int, hidden: int, rng: np.random.Generator) -> "MaskModel":
        return cls(mlp=SmallMlp.create([channels, hidden, 1], head="sigmoid",
                                       rng=rng))

    def cell_mask(self, feat: FeatureMap):
        """Per-cell mask values in (0,1) plus the MLP tape."""
        hf, wf, c = feat.grid.shape
        if c != self.mlp.in_dim:
            raise ContractError(
                f"feature channels {c} != mask MLP input {self.mlp.in_dim}")
        out, backward = self.mlp.forward_backward(feat.grid.reshape(-1, c))
        return out.reshape(hf, wf), backward


def predict_mask(model: MaskModel, feat: FeatureMap,
                 out_res: Tuple[int, int]) -> np.ndarray:
    """Per-pixel transient mask in (0,1)^{HxW} (1 = static)."""
    cells, _ = model.cell_mask(feat)
    scale = (feat.source_res[0] / out_res[0], feat.source_res[1] / out_res[1])
    return upsample_cells(cells, feat.patch_size, out_res, scale=scale)


# ---------------------------------------------------------------------------
# Supervision targets and losses

def cosine_target(f_gt: FeatureMap, f_render: FeatureMap) -> np.ndarray:
    """max(2 cos(f_t, f_t') - 1, 0) per cell; zero-norm cells get cos 0."""
    a = f_gt.grid
    b = f_render.grid
    if a.shape != b.shape:
        raise ContractError("feature grids differ in shape")
    dot = np.sum(a * b, axis=2)
    na = np.linalg.norm(a, axis=2)
    nb = np.linalg.norm(b, axis=2)
    denom = na * nb
    cos = np.divide(dot, denom, out=np.zeros_like(dot), where=denom > 0.0)
    return np.maximum(2.0 * cos - 1.0, 0.0)


def l1_mask_loss(mask: np.ndarray, target: np.ndarray):
    """Mean absolute difference plus its gradient w.r.t. the mask.

    Subgradient 0 at exact ties.
    """
    mask = np.asarray(mask, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mask.shape != target.shape:
        raise ContractError("mask/target shape mismatch")
    diff = mask - target
    value = float(np.mean(np.abs(diff)))
    d_mask = np.sign(diff) / diff.size
    return value, d_mask


def loss_cos(m_cells: np.ndarray, m_cos: np.ndarray):
    return l1_mask_loss(m_cells, m_cos)


def loss_residual(m_image: np.ndarray, inlier_map: np.ndarray):
    return l1_mask_loss(m_image, inlier_map)


def residual_error(rendered: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel mean-absolute RGB error."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ContractError("residual inputs differ in shape")
    return np.mean(np.abs(rendered - gt), axis=2)


def residual_target(rendered: np.ndarray, gt: np.ndarray,
                    rho: float = RESIDUAL_QUANTILE) -> np.ndarray:
    """Binary inlier map: 3x3-blurred residual below its rho-quantile.

    Ties count as inliers, so identical images yield an all-ones map.
    """
    return inlier_from_error(residual_error(rendered, gt), rho=rho)


def inlier_from_error(err: np.ndarray, rho: float = RESIDUAL_QUANTILE) -> np.ndarray:
    blurred = _box_blur3(err)
    q = np.quantile(blurred, rho)
    return (blurred <= q).astype(np.float64)


def loss_reg(m_image: np.ndarray, iteration: int, beta_reg: float):
    """exp(-i / beta) * mean(1 - M); decays from weight 1 at iteration 0."""
    if beta_reg <= 0:
        raise ConfigError("beta_reg must be positive")
    weight = np.exp(-iteration / beta_reg)
    m_image = np.asarray(m_image, dtype=np.float64)
    value = float(weight * np.mean(1.0 - m_image))
    d_mask = np.full_like(m_image, -weight / m_image.size)
    return value, d_mask


def mask_objective(l_residual_val: float, l_cos_val: float, l_reg_val: float,
                   weights=(0.5, 0.5, 2.0)) -> float:
    """Weighted sum of the three mask supervision terms."""
    lr, lc, lg = weights
    return lr * l_residual_val + lc * l_cos_val + lg * l_reg_val


# ---------------------------------------------------------------------------
# Resolution cascade

@dataclass(frozen=True)
class CascadeSchedule:
    """Low-to-high supervision switch, coupled to the densification start."""

    switch_iter: int
    low_res_factor: int = 2
    residual_extra_factor: int = 4

    def __post_init__(self):
        if self.low_res_factor not in (1, 2, 4, 8):
            raise ConfigError("low_res_factor must be one of 1, 2, 4, 8")
        if self.switch_iter < 0:
            raise ConfigError("switch_iter must be >= 0")


def cascade_phase(iteration: int, cascade: CascadeSchedule) -> str:
    """'low' strictly before the switch, 'high' at and after it."""
    return "low" if iteration < cascade.switch_iter else "high"


def render_factor(iteration: int, cascade: CascadeSchedule) -> int:
    return cascade.low_res_factor if cascade_phase(iteration, cascade) == "low" else 1


def residual_downsample(iteration: int, cascade: CascadeSchedule) -> int:
    """Extra downsample applied to residual supervision in the low phase."""
    return (cascade.residual_extra_factor
            if cascade_phase(iteration, cascade) == "low" else 1)


def block_mean(img: np.ndarray, factor: int) -> np.ndarray:
    """Exact block-mean downsample (resolution must divide evenly)."""
    if factor == 1:
        return img
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ContractError("image size not divisible by downsample factor")
    shape = (h // factor, factor, w // factor, factor) + img.shape[2:]
    return img.reshape(shape).mean(axis=(1, 3))
