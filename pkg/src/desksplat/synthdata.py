"""Deterministic synthetic multi-view datasets with oracle ground truth.

The data-generating model is this package's own renderer: a seeded random
Gaussian scene is rendered from an orbit of cameras, per-view affine
illumination is applied to the quantized clean image, and opaque sprite
rectangles (the transient distractors) are composited over train views
with a pixel-exact oracle mask. Test views are always transient-free.

Disk layout:
    cameras.json        intrinsics, poses, split tags, scene extent
    images/<id>.png     8-bit final images
    clean/<id>.png      8-bit clean renders (debug aid, optional on load)
    oracle_masks/<id>.png   8-bit, 255 = static (train views)
    oracle_illum.json   per-view alpha*, beta*
    points_init.json    noisy subsampled ground-truth points + colors
    features/<id>_<phase>.splf   optional precomputed feature maps
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .masking import BuiltinFeatureExtractor, block_mean, write_splf
from .rasterizer import render
from .scene import Camera, GaussianSet, logit, look_at_camera

DEFAULT_PALETTE = (
    (0.95, 0.15, 0.15), (0.10, 0.80, 0.20), (0.15, 0.25, 0.95),
    (0.95, 0.85, 0.10), (0.90, 0.15, 0.85), (0.10, 0.85, 0.90),
    (0.98, 0.55, 0.05), (0.60, 0.10, 0.70),
)


@dataclass(frozen=True)
class TransientSpec:
    count_per_image: int = 3
    size_frac: Tuple[float, float] = (0.10, 0.22)
    opacity: Tuple[float, float] = (0.85, 1.0)
    palette: Tuple[Tuple[float, float, float], ...] = DEFAULT_PALETTE
    soft_shadow: bool = False


@dataclass(frozen=True)
class IlluminationSpec:
    alpha_range: Tuple[float, float] = (1.0, 1.0)
    beta_range: Tuple[float, float] = (0.0, 0.0)

    @property
    def identity(self) -> bool:
        return self.alpha_range == (1.0, 1.0) and self.beta_range == (0.0, 0.0)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 0
    n_gaussians: int = 300
    extent: float = 4.0
    n_train: int = 24
    n_test: int = 6
    width: int = 96
    height: int = 64
    sh_degree: int = 2
    fov_deg: float = 55.0
    orbit_radius_frac: float = 1.35
    orbit_heights: Tuple[float, float] = (0.15, 0.55)
    transients: TransientSpec = field(default_factory=TransientSpec)
    illumination: IlluminationSpec = field(default_factory=IlluminationSpec)
    point_subsample: float = 0.5
    point_noise_frac: float = 0.01


@dataclass
class View:
    view_id: str
    split: str            # "train" | "test"
    camera: Camera
    image: np.ndarray     # float64 HxWx3 in [0,1]
    oracle_mask: Optional[np.ndarray] = None   # bool, True = static
    illum_alpha: Optional[np.ndarray] = None
    illum_beta: Optional[np.ndarray] = None


@dataclass
class Dataset:
    root: Optional[Path]
    views: List[View]
    points: np.ndarray          # (P, 3)
    point_colors: np.ndarray    # (P, 3)
    extent: float
    center: np.ndarray

    @property
    def train_views(self) -> List[View]:
        return [v for v in self.views if v.split == "train"]

    @property
    def test_views(self) -> List[View]:
        return [v for v in self.views if v.split == "test"]

    def view(self, view_id: str) -> View:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise DataError(f"unknown view {view_id}")


def spec_from_dict(data: dict) -> SyntheticSceneSpec:
    """Strict JSON -> spec: unknown keys raise, lists become tuples."""
    import dataclasses as _dc

    def build(cls, d, path):
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected an object")
        fields = {f.name: f for f in _dc.fields(cls)}
        unknown = set(d) - set(fields)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        nested = {"transients": TransientSpec, "illumination": IlluminationSpec}
        kwargs = {}
        for name, value in d.items():
            if cls is SyntheticSceneSpec and name in nested:
                kwargs[name] = build(nested[name], value, f"{path}.{name}")
            elif isinstance(value, list):
                kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v
                                     for v in value)
            else:
                kwargs[name] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    return build(SyntheticSceneSpec, data, "spec")


def load_spec(path) -> SyntheticSceneSpec:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
    return spec_from_dict(data)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def dequantize(img_u8: np.ndarray) -> np.ndarray:
    return np.asarray(img_u8, dtype=np.float64) / 255.0


def _save_png(path: Path, array_u8: np.ndarray) -> None:
    Image.fromarray(array_u8).save(path, format="PNG")


def _load_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except Exception as exc:
        raise DataError(f"failed to read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Ground-truth scene

def ground_truth_gaussians(spec: SyntheticSceneSpec) -> GaussianSet:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 101]))
    n = spec.n_gaussians
    e = spec.extent
    positions = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([e, e, 0.7 * e])
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    log_scales = rng.uniform(np.log(0.02 * e), np.log(0.065 * e), size=(n, 3))
    opacity = rng.uniform(0.55, 0.95, size=n)
    k = (spec.sh_degree + 1) ** 2
    sh = rng.normal(0.0, 0.08, size=(n, k, 3))
    from .scene import SH_C0

    dc_rgb = rng.uniform(0.15, 0.8, size=(n, 3))
    sh[:, 0, :] = (dc_rgb - 0.5) / SH_C0
    return GaussianSet(positions=positions, rotations=quats,
                       log_scales=log_scales,
                       opacity_logits=logit(opacity), sh_coeffs=sh)


def orbit_cameras(spec: SyntheticSceneSpec) -> List[Tuple[str, str, Camera]]:
    fx = (spec.width / 2.0) / np.tan(np.deg2rad(spec.fov_deg) / 2.0)
    radius = spec.orbit_radius_frac * spec.extent
    out = []
    n_total = spec.n_train + spec.n_test
    if spec.n_test:
        stride = max(n_total // spec.n_test, 1)
        test_slots = set(list(range(1, n_total, stride))[:spec.n_test])
    else:
        test_slots = set()
    ti = ei = 0
    for slot in range(n_total):
        theta = 2.0 * np.pi * slot / n_total
        h = spec.orbit_heights[slot % 2] * spec.extent
        eye = np.array([radius * np.cos(theta), radius * np.sin(theta), h])
        cam = look_at_camera(eye=eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0),
                             fx=fx, fy=fx, width=spec.width, height=spec.height,
                             near=0.05 * spec.extent, far=10.0 * spec.extent)
        if slot in test_slots and ei < spec.n_test:
            out.append((f"test_{ei:03d}", "test", cam))
            ei += 1
        else:
            out.append((f"train_{ti:03d}", "train", cam))
            ti += 1
    return out


def _composite_sprites(rng, img_u8: np.ndarray, spec: TransientSpec
                       ) -> Tuple[np.ndarray, np.ndarray]:
    """Composite random opaque rectangles; returns (image_u8, static_mask)."""
    h, w, _ = img_u8.shape
    base = img_u8.copy()
    img = dequantize(img_u8)
    covered = np.zeros((h, w), dtype=bool)
    smin, smax = spec.size_frac
    for _ in range(spec.count_per_image):
        sw = int(round(rng.uniform(smin, smax) * w))
        sh_px = int(round(rng.uniform(smin, smax) * h))
        sw, sh_px = max(sw, 2), max(sh_px, 2)
        x0 = int(rng.integers(0, max(w - sw, 1)))
        y0 = int(rng.integers(0, max(h - sh_px, 1)))
        color = np.array(spec.palette[int(rng.integers(len(spec.palette)))])
        a = float(rng.uniform(*spec.opacity))
        if spec.soft_shadow:
            ys = np.arange(h)[:, None]
            xs = np.arange(w)[None, :]
            cy, cx = y0 + sh_px, x0 + sw / 2.0
            ry, rx = 0.5 * sh_px, 0.9 * sw
            d = ((ys - cy) / max(ry, 1)) ** 2 + ((xs - cx) / max(rx, 1)) ** 2
            shadow_a = np.clip(1.0 - d, 0.0, 1.0) * 0.4
            img = (1.0 - shadow_a[:, :, None]) * img
            covered |= shadow_a > 0.05
        sl = (slice(y0, y0 + sh_px), slice(x0, x0 + sw))
        img[sl] = (1.0 - a) * img[sl] + a * color
        covered[sl] = True
    out = quantize(img)
    # a transient pixel must differ from the base image after quantization
    same = covered & np.all(out == base, axis=2)
    ch0 = out[:, :, 0]
    out[:, :, 0] = np.where(same, np.where(ch0 < 255, ch0 + 1, ch0 - 1), ch0)
    return out, ~covered


def _apply_illumination(img_u8: np.ndarray, alpha: np.ndarray,
                        beta: np.ndarray) -> np.ndarray:
    out = np.clip(alpha * dequantize(img_u8) + beta, 0.0, 1.0)
    return quantize(out)


def generate(spec: SyntheticSceneSpec, out_dir,
             write_features: bool = False,
             feature_low_factor: int = 2) -> Dataset:
    """Generate a dataset on disk (and in memory). Bit-reproducible."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "clean").mkdir(exist_ok=True)
    (out / "oracle_masks").mkdir(exist_ok=True)

    gt = ground_truth_gaussians(spec)
    cams = orbit_cameras(spec)
    sprite_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 202]))
    illum_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 303]))
    point_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 404]))

    views = []
    illum_json = {}
    cam_json = {"scene": {"extent": spec.extent, "center": [0.0, 0.0, 0.0]},
                "views": []}
    extractor = BuiltinFeatureExtractor()
    if write_features:
        (out / "features").mkdir(exist_ok=True)

    for view_id, split, cam in cams:
        clean = render(gt, cam).image
        clean_u8 = quantize(clean)
        _save_png(out / "clean" / f"{view_id}.png", clean_u8)

        if spec.illumination.identity:
            alpha = np.ones(3)
            beta = np.zeros(3)
            lit_u8 = clean_u8
        else:
            alpha = illum_rng.uniform(*spec.illumination.alpha_range, size=3)
            beta = illum_rng.uniform(*spec.illumination.beta_range, size=3)
            lit_u8 = _apply_illumination(clean_u8, alpha, beta)
        illum_json[view_id] = {"alpha": list(alpha), "beta": list(beta)}

        mask = None
        if split == "train" and spec.transients.count_per_image > 0:
            final_u8, static = _composite_sprites(sprite_rng, lit_u8,
                                                  spec.transients)
            mask = static
            _save_png(out / "oracle_masks" / f"{view_id}.png",
                      np.where(static, 255, 0).astype(np.uint8))
        else:
            final_u8 = lit_u8
            if split == "train":
                mask = np.ones((spec.height, spec.width), dtype=bool)
                _save_png(out / "oracle_masks" / f"{view_id}.png",
                          np.full((spec.height, spec.width), 255, np.uint8))
        _save_png(out / "images" / f"{view_id}.png", final_u8)

        if write_features:
            img_f = dequantize(final_u8)
            write_splf(out / "features" / f"{view_id}_high.splf",
                       extractor.extract(img_f))
            low = block_mean(img_f, feature_low_factor)
            write_splf(out / "features" / f"{view_id}_low.splf",
                       extractor.extract(low))

        cam_json["views"].append({
            "id": view_id, "split": split,
            "width": cam.width, "height": cam.height,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "near": cam.near, "far": cam.far,
            "R": [list(map(float, row)) for row in cam.R],
            "t": list(map(float, cam.t)),
        })
        views.append(View(view_id=view_id, split=split, camera=cam,
                          image=dequantize(final_u8), oracle_mask=mask,
                          illum_alpha=alpha, illum_beta=beta))

    n_pts = max(int(round(spec.point_subsample * len(gt))), 8)
    sel = np.sort(point_rng.choice(len(gt), size=n_pts, replace=False))
    noise = point_rng.normal(0.0, spec.point_noise_frac * spec.extent,
                             size=(n_pts, 3))
    points = gt.positions[sel] + noise
    from .scene import SH_C0

    colors = np.clip(SH_C0 * gt.sh_coeffs[sel, 0, :] + 0.5, 0.0, 1.0)

    with open(out / "cameras.json", "w", encoding="utf-8") as f:
        json.dump(cam_json, f, indent=1, sort_keys=True)
    with open(out / "oracle_illum.json", "w", encoding="utf-8") as f:
        json.dump(illum_json, f, indent=1, sort_keys=True)
    with open(out / "points_init.json", "w", encoding="utf-8") as f:
        json.dump({"positions": [list(map(float, p)) for p in points],
                   "colors": [list(map(float, c)) for c in colors]},
                  f, indent=1, sort_keys=True)

    return Dataset(root=out, views=views, points=points, point_colors=colors,
                   extent=spec.extent, center=np.zeros(3))


def load(path) -> Dataset:
    """Load a dataset directory; optional files are tolerated."""
    root = Path(path)
    cam_path = root / "cameras.json"
    if not cam_path.exists():
        raise DataError(f"{root}: missing cameras.json")
    try:
        with open(cam_path, encoding="utf-8") as f:
            cam_json = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"{cam_path}: malformed JSON: {exc}") from exc

    illum_json = {}
    illum_path = root / "oracle_illum.json"
    if illum_path.exists():
        with open(illum_path, encoding="utf-8") as f:
            illum_json = json.load(f)

    pts_path = root / "points_init.json"
    if not pts_path.exists():
        raise DataError(f"{root}: missing points_init.json")
    with open(pts_path, encoding="utf-8") as f:
        pts = json.load(f)
    points = np.asarray(pts["positions"], dtype=np.float64)
    colors = np.asarray(pts["colors"], dtype=np.float64)

    views = []
    for rec in cam_json["views"]:
        view_id = rec["id"]
        img_path = root / "images" / f"{view_id}.png"
        if not img_path.exists():
            raise DataError(f"{root}: missing image for view {view_id}")
        img = _load_png(img_path)
        if img.shape[:2] != (rec["height"], rec["width"]):
            raise DataError(f"{view_id}: image size does not match cameras.json")
        cam = Camera(fx=rec["fx"], fy=rec["fy"], cx=rec["cx"], cy=rec["cy"],
                     width=rec["width"], height=rec["height"],
                     R=np.asarray(rec["R"], dtype=np.float64),
                     t=np.asarray(rec["t"], dtype=np.float64),
                     near=rec["near"], far=rec["far"])
        mask = None
        if rec["split"] == "train":
            mask_path = root / "oracle_masks" / f"{view_id}.png"
            if mask_path.exists():
                mask = _load_png(mask_path) >= 128
                if mask.shape != img.shape[:2]:
                    raise DataError(f"{view_id}: oracle mask size mismatch")
            else:
                mask = np.ones(img.shape[:2], dtype=bool)
        il = illum_json.get(view_id)
        alpha = np.asarray(il["alpha"]) if il else np.ones(3)
        beta = np.asarray(il["beta"]) if il else np.zeros(3)
        views.append(View(view_id=view_id, split=rec["split"], camera=cam,
                          image=dequantize(img), oracle_mask=mask,
                          illum_alpha=alpha, illum_beta=beta))
    scene = cam_json.get("scene", {})
    return Dataset(root=root, views=views, points=points, point_colors=colors,
                   extent=float(scene.get("extent", 1.0)),
                   center=np.asarray(scene.get("center", [0, 0, 0]),
                                     dtype=np.float64))


def initial_gaussians(ds: Dataset, sh_degree: int,
                      init_opacity: float = 0.1,
                      embedding_dim: Optional[int] = None,
                      fourier_bands: int = 2) -> GaussianSet:
    """Training starting point from the dataset's initial points.

    Scales follow the mean distance to the three nearest neighbours; colors
    seed the SH DC band; opacity starts at ``init_opacity``.
    """
    from scipy.spatial import cKDTree

    from .appearance import fourier_embed
    from .scene import SH_C0

    pts = ds.points
    n = len(pts)
    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=min(4, n))
    if dist.ndim == 1:
        dist = dist[:, None]
    mean_dist = np.clip(dist[:, 1:].mean(axis=1), 1e-7, None)
    k = (sh_degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = (ds.point_colors - 0.5) / SH_C0
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    emb = None
    if embedding_dim is not None:
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        emb = fourier_embed(pts, fourier_bands, embedding_dim, lo, hi)
    return GaussianSet(
        positions=pts.copy(), rotations=quats,
        log_scales=np.log(mean_dist)[:, None].repeat(3, axis=1),
        opacity_logits=np.full(n, logit(init_opacity)),
        sh_coeffs=sh, embeddings=emb)
