"""Training orchestration: run configuration, the per-iteration protocol,
evaluation, checkpointing and ablation sweeps.

Modes are presets over five feature flags:
    3dgs-baseline         mask/dg/mb/mr/appearance all off
    robustsplat           mask + delayed growth + cascade + regularization
    robustsplat-plusplus  robustsplat + affine appearance modeling

Per iteration: pick a train view (seeded epoch shuffle), pick the cascade
phase, render at the phase resolution, predict the transient mask, apply
the masked photometric loss, update the mask model from its supervision
losses, step all optimizers, then run density control.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .appearance import (
    AppearanceModel,
    ImageEmbeddingTable,
    apply_affine,
    apply_affine_backward,
    photometric_loss,
    region_columns,
    testtime_fit_embedding,
)
from .container import load_container, save_container
from .densify import DensifyEdit, DensifySchedule, densify_step, opacity_reset
from .errors import ConfigError, ContractError, NumericsError
from .masking import (
    BuiltinFeatureExtractor,
    CascadeSchedule,
    FileFeatureExtractor,
    MaskModel,
    block_mean,
    cascade_phase,
    cosine_target,
    inlier_from_error,
    loss_cos,
    loss_reg,
    loss_residual,
    mask_objective,
    predict_mask,
    render_factor,
    residual_downsample,
    residual_error,
    upsample_cells,
    upsample_cells_transpose,
)
from .metrics import ViewRow, mask_iou, psnr, ssim, write_metrics_csv
from .optim import AdamState, MlpAdam, SmallMlp, adam_step
from .rasterizer import (
    GradAccumulator,
    blend_backward,
    geometry_color_backward,
    render,
    update_accumulator,
)
from .scene import GaussianSet, normalize_quats
from .synthdata import Dataset, initial_gaussians, load as load_dataset, quantize

MODES = ("3dgs-baseline", "robustsplat", "robustsplat-plusplus")
THREADS_ENV = "DESKSPLAT_THREADS"


# ---------------------------------------------------------------------------
# Configuration

@dataclass(frozen=True)
class Toggles:
    mask: Optional[bool] = None
    dg: Optional[bool] = None
    mb: Optional[bool] = None
    mr: Optional[bool] = None
    appearance: Optional[bool] = None


@dataclass(frozen=True)
class Flags:
    mask: bool
    dg: bool
    mb: bool
    mr: bool
    appearance: bool


MODE_PRESETS = {
    "3dgs-baseline": Flags(False, False, False, False, False),
    "robustsplat": Flags(True, True, True, True, False),
    "robustsplat-plusplus": Flags(True, True, True, True, True),
}


@dataclass(frozen=True)
class DensifyConfig:
    delayed_start_iter: int = 1000   # used when the dg flag is on
    early_start_iter: int = 100      # vanilla growth start otherwise
    interval: int = 100
    stop_frac: float = 0.8
    grad_threshold: float = 2e-4
    scale_split_frac: float = 0.01
    min_opacity: float = 5e-3
    opacity_reset_interval: int = 0
    max_gaussians: int = 800
    max_screen_radius_px: Optional[float] = None


@dataclass(frozen=True)
class CascadeConfig:
    low_res_factor: int = 2
    residual_extra_factor: int = 4


@dataclass(frozen=True)
class MaskConfig:
    hidden_width: int = 64
    lr: float = 1e-3
    lambda_residual: float = 0.5
    lambda_cos: float = 0.5
    lambda_reg: float = 2.0
    beta_reg: float = 200.0
    residual_quantile: float = 0.7
    candidate_per_image: bool = False


@dataclass(frozen=True)
class FeatureConfig:
    extractor: str = "builtin"       # "builtin" | "files"
    patch_px: int = 14
    feature_dir: Optional[str] = None


@dataclass(frozen=True)
class AppearanceConfig:
    image_dim: int = 16
    gaussian_dim: int = 12
    fourier_bands: int = 2
    hidden_width: int = 128
    mlp_lr: float = 5e-4
    image_lr: float = 1e-3
    image_lr_testtime: float = 1e-2
    gaussian_lr: float = 5e-3
    testtime_steps: int = 128


@dataclass(frozen=True)
class GaussianLrConfig:
    position_init_frac: float = 1.6e-4   # times scene extent
    position_final_frac: float = 1.6e-6
    opacity: float = 0.05
    scale: float = 5e-3
    rotation: float = 1e-3
    sh: float = 2.5e-3


@dataclass(frozen=True)
class LossConfig:
    lambda_dssim: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    dataset: str
    out_dir: str
    mode: str = "robustsplat"
    seed: int = 0
    total_iters: int = 3000
    sh_degree: int = 2
    eval_interval: int = 250
    checkpoint_interval: int = 1000
    snapshot_interval: int = 0
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    appearance: AppearanceConfig = field(default_factory=AppearanceConfig)
    lr: GaussianLrConfig = field(default_factory=GaussianLrConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    toggles: Toggles = field(default_factory=Toggles)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.total_iters < 1:
            raise ConfigError("total_iters must be positive")

    def flags(self) -> Flags:
        base = MODE_PRESETS[self.mode]
        vals = dataclasses.asdict(base)
        for name, override in dataclasses.asdict(self.toggles).items():
            if override is not None:
                vals[name] = override
        # early-stage regularization belongs to mask learning: it follows the
        # mask flag unless toggled explicitly
        if self.toggles.mr is None:
            vals["mr"] = vals["mask"]
        if not vals["mask"]:
            vals["mb"] = False
            vals["mr"] = False
        return Flags(**vals)

    def densify_start(self) -> int:
        f = self.flags()
        return self.densify.delayed_start_iter if f.dg else self.densify.early_start_iter

    def densify_schedule(self) -> DensifySchedule:
        stop = int(round(self.densify.stop_frac * self.total_iters))
        start = self.densify_start()
        return DensifySchedule(
            start_iter=start, stop_iter=max(stop, start + 1),
            interval=self.densify.interval,
            grad_threshold=self.densify.grad_threshold,
            scale_split_frac=self.densify.scale_split_frac,
            min_opacity=self.densify.min_opacity,
            opacity_reset_interval=self.densify.opacity_reset_interval,
            max_gaussians=self.densify.max_gaussians,
            max_screen_radius_px=self.densify.max_screen_radius_px)

    def cascade_schedule(self) -> CascadeSchedule:
        f = self.flags()
        switch = self.densify_start() if (f.mask and f.mb) else 0
        return CascadeSchedule(
            switch_iter=switch,
            low_res_factor=self.cascade.low_res_factor,
            residual_extra_factor=self.cascade.residual_extra_factor)


def _from_dict(cls, data, path="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        nested = {
            "densify": DensifyConfig, "cascade": CascadeConfig,
            "mask": MaskConfig, "features": FeatureConfig,
            "appearance": AppearanceConfig, "lr": GaussianLrConfig,
            "loss": LossConfig, "toggles": Toggles,
        }.get(name)
        if nested is not None and cls is RunConfig:
            kwargs[name] = _from_dict(nested, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, indent=1, sort_keys=True)
        f.write("\n")


def thread_count() -> int:
    try:
        return max(int(os.environ.get(THREADS_ENV, "1")), 1)
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Gaussian optimizer bundle

GAUSSIAN_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits",
                   "sh_coeffs", "embeddings")


class GaussianAdam:
    """Per-parameter-class Adam over the GaussianSet arrays."""

    def __init__(self, cfg: RunConfig, extent: float, with_embeddings: bool):
        lr = cfg.lr
        self.extent = extent
        self.total_iters = cfg.total_iters
        self.pos_init = lr.position_init_frac * extent
        self.pos_final = lr.position_final_frac * extent
        self.states: Dict[str, AdamState] = {
            "positions": AdamState(lr=self.pos_init),
            "rotations": AdamState(lr=lr.rotation),
            "log_scales": AdamState(lr=lr.scale),
            "opacity_logits": AdamState(lr=lr.opacity),
            "sh_coeffs": AdamState(lr=lr.sh),
        }
        if with_embeddings:
            self.states["embeddings"] = AdamState(lr=cfg.appearance.gaussian_lr)

    def position_lr(self, iteration: int) -> float:
        t = min(max(iteration, 0), self.total_iters) / self.total_iters
        return float(self.pos_init * (self.pos_final / self.pos_init) ** t)

    def step(self, gs: GaussianSet, grads, iteration: int) -> None:
        for name, state in self.states.items():
            param = getattr(gs, name)
            grad = getattr(grads, name) if name != "embeddings" else grads.embeddings
            if param is None:
                continue
            lr = self.position_lr(iteration) if name == "positions" else None
            (new,) = adam_step(state, [param], [grad], lr=lr)
            setattr(gs, name, new)
        gs.renormalize_rotations()

    def remap(self, edit: DensifyEdit) -> None:
        if not edit.changed:
            return
        n_new = len(edit.new_parents)
        for state in self.states.values():
            if not state.m:
                continue
            old = state.m[0]
            pad = np.zeros((n_new,) + old.shape[1:], dtype=old.dtype)
            state.m = [np.concatenate([old[edit.keep], pad], axis=0)]
            oldv = state.v[0]
            state.v = [np.concatenate([oldv[edit.keep], pad], axis=0)]


@dataclass
class ParamGrads:
    """Gradient bundle matching GaussianAdam group names."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    embeddings: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# Trainer

@dataclass
class StepRecord:
    iteration: int
    phase: str
    render_hw: tuple
    residual_hw: Optional[tuple]
    feature_hw: Optional[tuple]
    loss: float
    mask_loss: Optional[float]
    gaussian_count: int


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: Optional[Dataset] = None):
        self.cfg = cfg
        self.flags = cfg.flags()
        self.dataset = dataset if dataset is not None else load_dataset(cfg.dataset)
        self.threads = thread_count()
        self.out_dir = Path(cfg.out_dir)
        self.densify_sched = cfg.densify_schedule()
        self.cascade = cfg.cascade_schedule()
        self.train_views = self.dataset.train_views
        if not self.train_views:
            raise ConfigError("dataset has no training views")

        seed_seq = np.random.SeedSequence([cfg.seed, 7777])
        child = seed_seq.spawn(4)
        self.view_rng = np.random.default_rng(child[0])
        self.densify_rng = np.random.default_rng(child[1])
        init_rng = np.random.default_rng(child[2])
        app_rng = np.random.default_rng(child[3])

        emb_dim = cfg.appearance.gaussian_dim if self.flags.appearance else None
        self.gaussians = initial_gaussians(
            self.dataset, cfg.sh_degree, embedding_dim=emb_dim,
            fourier_bands=cfg.appearance.fourier_bands)
        self.accum = GradAccumulator.zeros(len(self.gaussians))
        self.g_adam = GaussianAdam(cfg, self.dataset.extent,
                                   with_embeddings=self.flags.appearance)

        self.extractor = self._make_extractor()
        self.mask_model = None
        self.mask_adam = None
        if self.flags.mask:
            self.mask_model = MaskModel.create(
                self._feature_channels(), cfg.mask.hidden_width, init_rng)
            self.mask_adam = MlpAdam(self.mask_model.mlp, cfg.mask.lr)

        self.appearance = None
        self.embed_table = None
        self.app_adam = None
        self.embed_adam = None
        if self.flags.appearance:
            self.appearance = AppearanceModel.create(
                cfg.appearance.image_dim, cfg.appearance.gaussian_dim,
                cfg.appearance.hidden_width, app_rng)
            self.app_adam = MlpAdam(self.appearance.mlp, cfg.appearance.mlp_lr)
            self.embed_table = ImageEmbeddingTable.create(
                len(self.train_views), cfg.appearance.image_dim, app_rng)
            self.embed_adam = AdamState(lr=cfg.appearance.image_lr)

        self.iteration = 0
        self.epoch_perm = self.view_rng.permutation(len(self.train_views))
        self.epoch_pos = 0
        self.metrics_rows: List[ViewRow] = []
        self.log_lines: List[str] = []
        self.densify_reports: List = []
        self.last_checkpoint: Optional[str] = None
        self._gt_feature_cache = {}

    # -- helpers -----------------------------------------------------------

    def _make_extractor(self):
        fc = self.cfg.features
        if fc.extractor == "builtin":
            return BuiltinFeatureExtractor(patch_px=fc.patch_px)
        if fc.extractor == "files":
            if not fc.feature_dir:
                raise ConfigError("features.extractor=files requires feature_dir")
            return FileFeatureExtractor(fc.feature_dir)
        raise ConfigError(f"unknown feature extractor {fc.extractor!r}")

    def _feature_channels(self) -> int:
        return self.extractor.channels

    # the cosine supervision always compares grids of the builtin
    # descriptor so rendered and captured features share one space, even
    # when the mask MLP input comes from precomputed files
    _builtin = BuiltinFeatureExtractor()

    def _gt_features(self, view, factor: int):
        key = (view.view_id, factor)
        if key not in self._gt_feature_cache:
            img = block_mean(view.image, factor)
            phase = "low" if factor > 1 else "high"
            if isinstance(self.extractor, FileFeatureExtractor):
                feats = self.extractor.extract_named(
                    f"{view.view_id}_{phase}", source_res=img.shape[:2])
            else:
                feats = self.extractor.extract(img)
            cos_feats = self._builtin.extract(img)
            self._gt_feature_cache[key] = (feats, cos_feats)
        return self._gt_feature_cache[key]

    def _next_view_index(self) -> int:
        if self.epoch_pos >= len(self.epoch_perm):
            self.epoch_perm = self.view_rng.permutation(len(self.train_views))
            self.epoch_pos = 0
        idx = int(self.epoch_perm[self.epoch_pos])
        self.epoch_pos += 1
        return idx

    def _log(self, rec: StepRecord) -> None:
        self.log_lines.append(json.dumps({
            "iter": rec.iteration, "phase": rec.phase,
            "render_hw": list(rec.render_hw),
            "residual_hw": list(rec.residual_hw) if rec.residual_hw else None,
            "feature_hw": list(rec.feature_hw) if rec.feature_hw else None,
            "loss": rec.loss, "mask_loss": rec.mask_loss,
            "gaussians": rec.gaussian_count,
        }, sort_keys=True))

    # -- one iteration -----------------------------------------------------

    def step(self) -> StepRecord:
        cfg = self.cfg
        it = self.iteration
        view_idx = self._next_view_index()
        view = self.train_views[view_idx]
        phase = cascade_phase(it, self.cascade)
        factor = render_factor(it, self.cascade)
        gt = block_mean(view.image, factor)

        appearance_ctx = {}
        appearance_fn = None
        if self.flags.appearance:
            f_img = self.embed_table.table[view_idx]

            def appearance_fn(colors, src):
                alpha, beta, backward = self.appearance.coeffs(
                    colors, f_img, self.gaussians.embeddings[src])
                appearance_ctx.update(colors=colors, src=src, alpha=alpha,
                                      beta=beta, backward=backward)
                return apply_affine(colors, alpha, beta)

        out = render(self.gaussians, view.camera, factor=factor,
                     appearance_fn=appearance_fn, threads=self.threads)
        c_raw = out.image
        c_aff = out.image_aff if out.image_aff is not None else c_raw

        feature_hw = None
        if self.flags.mask:
            f_gt, f_gt_cos = self._gt_features(view, factor)
            cells, cell_backward = self.mask_model.cell_mask(f_gt)
            m_render = upsample_cells(cells, f_gt.patch_size, c_raw.shape[:2])
            feature_hw = f_gt.grid.shape[:2]
        else:
            cells = cell_backward = None
            m_render = np.ones(c_raw.shape[:2])

        loss_val, d_aff, d_raw = photometric_loss(
            c_aff, c_raw, gt, m_render, cfg.loss.lambda_dssim)
        if not math.isfinite(loss_val):
            raise NumericsError(
                f"non-finite photometric loss at iteration {it}",
                iteration=it, last_checkpoint=self.last_checkpoint)

        if self.flags.appearance:
            bg = blend_backward(out.tape, d_raw, d_image_aff=d_aff,
                                threads=self.threads)
            d_splat_aff = bg.d_color_aff
            ctx = appearance_ctx
            d_color_extra, d_alpha, d_beta = apply_affine_backward(
                ctx["colors"], ctx["alpha"], ctx["beta"], d_splat_aff)
            mlp_grads = ctx["backward"]((d_alpha, d_beta))
            d_inputs = mlp_grads["x"]
            d_color_total = bg.d_color + d_color_extra + d_inputs[:, :3]
            d_f_img = d_inputs[:, 3:3 + cfg.appearance.image_dim].sum(axis=0)
            d_f_gs_rows = d_inputs[:, 3 + cfg.appearance.image_dim:]
            emb_grad = np.zeros_like(self.gaussians.embeddings)
            emb_grad[ctx["src"]] = d_f_gs_rows
        else:
            bg = blend_backward(out.tape, d_raw + d_aff, threads=self.threads)
            d_color_total = bg.d_color
            mlp_grads = None
            emb_grad = None

        grads = geometry_color_backward(out.tape, bg, d_color_total)
        update_accumulator(self.accum, out.tape, bg,
                           position_grads=grads.positions)

        mask_loss_val = None
        residual_hw = None
        if self.flags.mask:
            mask_loss_val, residual_hw = self._mask_update(
                it, gt, c_raw, c_aff, cells, cell_backward, f_gt, f_gt_cos)

        gstep = ParamGrads(
            positions=grads.positions, rotations=grads.rotations,
            log_scales=grads.log_scales, opacity_logits=grads.opacity_logits,
            sh_coeffs=grads.sh_coeffs, embeddings=emb_grad)
        self.g_adam.step(self.gaussians, gstep, it)

        if self.flags.appearance:
            self.app_adam.step(mlp_grads["weights"], mlp_grads["biases"])
            table_grad = np.zeros_like(self.embed_table.table)
            table_grad[view_idx] = d_f_img
            (self.embed_table.table,) = adam_step(
                self.embed_adam, [self.embed_table.table], [table_grad])

        self._densify(it)

        rec = StepRecord(
            iteration=it, phase=phase, render_hw=c_raw.shape[:2],
            residual_hw=residual_hw, feature_hw=feature_hw,
            loss=loss_val, mask_loss=mask_loss_val,
            gaussian_count=len(self.gaussians))
        self._log(rec)
        self.iteration += 1
        return rec

    def _mask_update(self, it, gt, c_raw, c_aff, cells, cell_backward,
                     f_gt, f_gt_cos):
        cfg = self.cfg.mask
        extra = residual_downsample(it, self.cascade)
        gt_res = block_mean(gt, extra)
        raw_res = block_mean(c_raw, extra)
        err_raw = residual_error(raw_res, gt_res)
        cos_raw = cosine_target(f_gt_cos, self._builtin.extract(c_raw))

        if self.flags.appearance and c_aff is not c_raw:
            aff_res = block_mean(c_aff, extra)
            err_aff = residual_error(aff_res, gt_res)
            if cfg.candidate_per_image:
                err = err_aff if err_aff.mean() <= err_raw.mean() else err_raw
            else:
                err = np.minimum(err_raw, err_aff)
            cos_aff = cosine_target(f_gt_cos, self._builtin.extract(c_aff))
            patch = f_gt_cos.patch_size
            cell_err_raw = _pool_to_cells(
                residual_error(c_raw, gt), patch, cos_raw.shape)
            cell_err_aff = _pool_to_cells(
                residual_error(c_aff, gt), patch, cos_raw.shape)
            if cfg.candidate_per_image:
                use_aff = residual_error(c_aff, gt).mean() <= \
                    residual_error(c_raw, gt).mean()
                m_cos = cos_aff if use_aff else cos_raw
            else:
                m_cos = np.where(cell_err_aff <= cell_err_raw, cos_aff, cos_raw)
        else:
            err = err_raw
            m_cos = cos_raw

        inlier = inlier_from_error(err, rho=cfg.residual_quantile)
        src_h, src_w = f_gt.source_res
        m_res = upsample_cells(
            cells, f_gt.patch_size, inlier.shape,
            scale=(src_h / inlier.shape[0], src_w / inlier.shape[1]))
        m_img = upsample_cells(cells, f_gt.patch_size, gt.shape[:2])

        l_res, d_m_res = loss_residual(m_res, inlier)
        l_cos, d_cells_cos = loss_cos(cells, m_cos)
        if self.flags.mr:
            l_reg, d_m_img = loss_reg(m_img, it, cfg.beta_reg)
            w_reg = cfg.lambda_reg
        else:
            l_reg, d_m_img = 0.0, np.zeros_like(m_img)
            w_reg = 0.0
        total = mask_objective(l_res, l_cos, l_reg,
                               (cfg.lambda_residual, cfg.lambda_cos, w_reg))

        d_cells = cfg.lambda_residual * upsample_cells_transpose(
            d_m_res, f_gt.patch_size, cells.shape,
            scale=(src_h / inlier.shape[0], src_w / inlier.shape[1]))
        d_cells += cfg.lambda_cos * d_cells_cos
        if w_reg:
            d_cells += w_reg * upsample_cells_transpose(
                d_m_img, f_gt.patch_size, cells.shape)
        sig_grads = cell_backward(d_cells.reshape(-1, 1))
        self.mask_adam.step(sig_grads["weights"], sig_grads["biases"])
        return total, inlier.shape

    def _densify(self, it: int) -> None:
        sched = self.densify_sched
        new_gs, edit, report = densify_step(
            self.gaussians, self.accum, sched, it, self.dataset.extent,
            self.g_adam.position_lr(it), self.densify_rng)
        if report.acted:
            self.gaussians = new_gs
            self.g_adam.remap(edit)
            self.accum = GradAccumulator.zeros(len(new_gs))
            self.densify_reports.append(report)
        gs2 = opacity_reset(self.gaussians, it, sched)
        if gs2 is not self.gaussians:
            self.gaussians = gs2

    # -- evaluation --------------------------------------------------------

    def evaluate(self, iteration: int) -> List[ViewRow]:
        rows = []
        count = len(self.gaussians)
        for view in self.dataset.test_views:
            img = render(self.gaussians, view.camera,
                         threads=self.threads).image
            rows.append(ViewRow(
                iteration=iteration, view_id=view.view_id,
                psnr=psnr(img, view.image), ssim=ssim(img, view.image),
                gaussian_count=count))
        if self.flags.mask:
            for view in self.train_views:
                if view.oracle_mask is None:
                    continue
                f_gt, _ = self._gt_features(view, 1)
                pred = predict_mask(self.mask_model, f_gt,
                                    view.image.shape[:2])
                iou = mask_iou(pred, view.oracle_mask)
                rows.append(ViewRow(
                    iteration=iteration, view_id=view.view_id,
                    iou_static=iou.static, iou_transient=iou.transient,
                    gaussian_count=count))
        return rows

    # -- persistence -------------------------------------------------------

    def setup_run_dir(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        save_config(self.cfg, self.out_dir / "config.json")
        with open(self.out_dir / "run_info.json", "w", encoding="utf-8") as f:
            json.dump({"version": f"desksplat-{__version__}",
                       "seed": self.cfg.seed, "mode": self.cfg.mode,
                       "flags": dataclasses.asdict(self.flags)},
                      f, indent=1, sort_keys=True)

    def _state_arrays(self) -> dict:
        arrays = {
            "gaussians/positions": self.gaussians.positions,
            "gaussians/rotations": self.gaussians.rotations,
            "gaussians/log_scales": self.gaussians.log_scales,
            "gaussians/opacity_logits": self.gaussians.opacity_logits,
            "gaussians/sh_coeffs": self.gaussians.sh_coeffs,
            "accum/grad_norm_sum": self.accum.grad_norm_sum,
            "accum/count": self.accum.count,
            "accum/max_radius_px": self.accum.max_radius_px,
            "accum/grad3d_sum": self.accum.grad3d_sum,
            "epoch_perm": self.epoch_perm,
        }
        if self.gaussians.embeddings is not None:
            arrays["gaussians/embeddings"] = self.gaussians.embeddings
        for name, st in self.g_adam.states.items():
            for i, m in enumerate(st.m):
                arrays[f"adam/{name}/m{i}"] = m
                arrays[f"adam/{name}/v{i}"] = st.v[i]
        if self.mask_model is not None:
            for i, (w, b) in enumerate(zip(self.mask_model.mlp.weights,
                                           self.mask_model.mlp.biases)):
                arrays[f"mask_mlp/w{i}"] = w
                arrays[f"mask_mlp/b{i}"] = b
            for i, m in enumerate(self.mask_adam.state.m):
                arrays[f"mask_adam/m{i}"] = m
                arrays[f"mask_adam/v{i}"] = self.mask_adam.state.v[i]
        if self.appearance is not None:
            for i, (w, b) in enumerate(zip(self.appearance.mlp.weights,
                                           self.appearance.mlp.biases)):
                arrays[f"app_mlp/w{i}"] = w
                arrays[f"app_mlp/b{i}"] = b
            for i, m in enumerate(self.app_adam.state.m):
                arrays[f"app_adam/m{i}"] = m
                arrays[f"app_adam/v{i}"] = self.app_adam.state.v[i]
            arrays["embed/table"] = self.embed_table.table
            for i, m in enumerate(self.embed_adam.m):
                arrays[f"embed_adam/m{i}"] = m
                arrays[f"embed_adam/v{i}"] = self.embed_adam.v[i]
        return arrays

    def _adam_meta(self) -> dict:
        meta = {}
        for name, st in self.g_adam.states.items():
            meta[name] = {"step_count": st.step_count, "skipped": st.skipped}
        if self.mask_adam is not None:
            meta["mask"] = {"step_count": self.mask_adam.state.step_count,
                            "skipped": self.mask_adam.state.skipped}
        if self.appearance is not None:
            meta["appearance"] = {"step_count": self.app_adam.state.step_count,
                                  "skipped": self.app_adam.state.skipped}
            meta["embed"] = {"step_count": self.embed_adam.step_count,
                             "skipped": self.embed_adam.skipped}
        return meta

    def save_checkpoint(self, path=None) -> str:
        if path is None:
            path = self.out_dir / f"checkpoint_{self.iteration:06d}.dskc"
        meta = {
            "kind": "desksplat-checkpoint",
            "version": __version__,
            "config": config_to_dict(self.cfg),
            "iteration": self.iteration,
            "epoch_pos": self.epoch_pos,
            "rng": {
                "view": self.view_rng.bit_generator.state,
                "densify": self.densify_rng.bit_generator.state,
            },
            "adam": self._adam_meta(),
            "metrics_rows": [dataclasses.asdict(r) for r in self.metrics_rows],
            "log_lines": self.log_lines,
            "densify_reports": [dataclasses.asdict(r)
                                for r in self.densify_reports],
        }
        save_container(path, meta, self._state_arrays())
        self.last_checkpoint = str(path)
        return str(path)

    @classmethod
    def from_checkpoint(cls, path, dataset: Optional[Dataset] = None,
                        out_dir: Optional[str] = None) -> "Trainer":
        meta, arrays = load_container(path)
        if meta.get("kind") != "desksplat-checkpoint":
            raise ContractError(f"{path} is not a training checkpoint")
        cfg = config_from_dict(meta["config"])
        if out_dir is not None:
            cfg = dataclasses.replace(cfg, out_dir=str(out_dir))
        tr = cls(cfg, dataset=dataset)
        tr.iteration = int(meta["iteration"])
        tr.epoch_pos = int(meta["epoch_pos"])
        tr.view_rng.bit_generator.state = meta["rng"]["view"]
        tr.densify_rng.bit_generator.state = meta["rng"]["densify"]
        tr.epoch_perm = arrays["epoch_perm"].astype(np.int64)
        emb = arrays.get("gaussians/embeddings")
        tr.gaussians = GaussianSet(
            positions=arrays["gaussians/positions"],
            rotations=arrays["gaussians/rotations"],
            log_scales=arrays["gaussians/log_scales"],
            opacity_logits=arrays["gaussians/opacity_logits"],
            sh_coeffs=arrays["gaussians/sh_coeffs"],
            embeddings=emb)
        tr.accum = GradAccumulator(
            grad_norm_sum=arrays["accum/grad_norm_sum"],
            count=arrays["accum/count"].astype(np.int64),
            max_radius_px=arrays["accum/max_radius_px"],
            grad3d_sum=arrays["accum/grad3d_sum"])
        for name, st in tr.g_adam.states.items():
            key = f"adam/{name}/m0"
            if key in arrays:
                st.m = [arrays[key]]
                st.v = [arrays[f"adam/{name}/v0"]]
            st.step_count = meta["adam"][name]["step_count"]
            st.skipped = meta["adam"][name]["skipped"]
        if tr.mask_model is not None:
            ws, bs = [], []
            for i in range(len(tr.mask_model.mlp.weights)):
                ws.append(arrays[f"mask_mlp/w{i}"])
                bs.append(arrays[f"mask_mlp/b{i}"])
            tr.mask_model.mlp.weights = ws
            tr.mask_model.mlp.biases = bs
            st = tr.mask_adam.state
            st.m = [arrays[f"mask_adam/m{i}"]
                    for i in range(len(ws) * 2)] if "mask_adam/m0" in arrays else []
            st.v = [arrays[f"mask_adam/v{i}"]
                    for i in range(len(ws) * 2)] if "mask_adam/v0" in arrays else []
            st.step_count = meta["adam"]["mask"]["step_count"]
            st.skipped = meta["adam"]["mask"]["skipped"]
        if tr.appearance is not None:
            ws, bs = [], []
            for i in range(len(tr.appearance.mlp.weights)):
                ws.append(arrays[f"app_mlp/w{i}"])
                bs.append(arrays[f"app_mlp/b{i}"])
            tr.appearance.mlp.weights = ws
            tr.appearance.mlp.biases = bs
            st = tr.app_adam.state
            if "app_adam/m0" in arrays:
                st.m = [arrays[f"app_adam/m{i}"] for i in range(len(ws) * 2)]
                st.v = [arrays[f"app_adam/v{i}"] for i in range(len(ws) * 2)]
            st.step_count = meta["adam"]["appearance"]["step_count"]
            st.skipped = meta["adam"]["appearance"]["skipped"]
            tr.embed_table.table = arrays["embed/table"]
            if "embed_adam/m0" in arrays:
                tr.embed_adam.m = [arrays["embed_adam/m0"]]
                tr.embed_adam.v = [arrays["embed_adam/v0"]]
            tr.embed_adam.step_count = meta["adam"]["embed"]["step_count"]
            tr.embed_adam.skipped = meta["adam"]["embed"]["skipped"]
        tr.metrics_rows = [ViewRow(**r) for r in meta["metrics_rows"]]
        tr.log_lines = list(meta["log_lines"])
        from .densify import DensifyReport

        tr.densify_reports = [DensifyReport(**r)
                              for r in meta.get("densify_reports", [])]
        tr.last_checkpoint = str(path)
        return tr

    # -- main loop ---------------------------------------------------------

    def _flush_outputs(self) -> None:
        write_metrics_csv(self.out_dir / "metrics.csv", self.metrics_rows)
        with open(self.out_dir / "run_log.jsonl", "w", encoding="utf-8") as f:
            for line in self.log_lines:
                f.write(line + "\n")
        if self.densify_reports:
            import csv as _csv

            with open(self.out_dir / "densify.csv", "w", newline="",
                      encoding="utf-8") as f:
                w = _csv.writer(f)
                w.writerow(["iter", "count", "clones", "splits", "prunes",
                            "capped"])
                for r in self.densify_reports:
                    w.writerow([r.iteration, r.count_after, r.clones,
                                r.splits, r.prunes, int(r.growth_capped)])

    def _snapshot(self, it: int, view, image: np.ndarray,
                  mask: Optional[np.ndarray]) -> None:
        snap = self.out_dir / "snapshots"
        snap.mkdir(exist_ok=True)
        from PIL import Image

        Image.fromarray(quantize(image)).save(
            snap / f"iter{it:06d}_{view.view_id}.png")
        if mask is not None:
            Image.fromarray((np.clip(mask, 0, 1) * 255).astype(np.uint8)).save(
                snap / f"iter{it:06d}_{view.view_id}_mask.png")

    def train(self) -> dict:
        cfg = self.cfg
        self.setup_run_dir()
        t0 = time.time()
        while self.iteration < cfg.total_iters:
            it = self.iteration
            rec = self.step()
            done = self.iteration >= cfg.total_iters
            if (it + 1) % cfg.eval_interval == 0 or done:
                self.metrics_rows.extend(self.evaluate(it + 1))
            if cfg.snapshot_interval and (it + 1) % cfg.snapshot_interval == 0:
                view = self.train_views[0]
                img = render(self.gaussians, view.camera,
                             threads=self.threads).image
                mask = None
                if self.flags.mask:
                    f_gt, _ = self._gt_features(view, 1)
                    mask = predict_mask(self.mask_model, f_gt,
                                        view.image.shape[:2])
                self._snapshot(it + 1, view, img, mask)
            if cfg.checkpoint_interval and (it + 1) % cfg.checkpoint_interval == 0 \
                    and not done:
                self.save_checkpoint()
        final = self.save_checkpoint(self.out_dir / "checkpoint_final.dskc")
        self._flush_outputs()
        wall = time.time() - t0
        test_rows = [r for r in self.metrics_rows
                     if r.iteration == cfg.total_iters and r.psnr is not None]
        return {
            "checkpoint": final,
            "wall_clock_s": wall,
            "final_mean_psnr": (float(np.mean([min(r.psnr, 99.0)
                                               for r in test_rows]))
                                if test_rows else None),
            "final_mean_ssim": (float(np.mean([r.ssim for r in test_rows]))
                                if test_rows else None),
            "gaussian_count": len(self.gaussians),
        }


def _pool_to_cells(err: np.ndarray, patch: int, cells_hw) -> np.ndarray:
    hf, wf = cells_hw
    out = np.zeros((hf, wf))
    for i in range(hf):
        for j in range(wf):
            blockv = err[i * patch:(i + 1) * patch, j * patch:(j + 1) * patch]
            out[i, j] = blockv.mean() if blockv.size else 0.0
    return out


def train_run(cfg: RunConfig, dataset: Optional[Dataset] = None) -> dict:
    return Trainer(cfg, dataset=dataset).train()


# ---------------------------------------------------------------------------
# Checkpoint-level operations (render / eval / ablate)

def _affine_render(tr: Trainer, camera, f_img: np.ndarray):
    def appearance_fn(colors, src):
        alpha, beta, _ = tr.appearance.coeffs(
            colors, f_img, tr.gaussians.embeddings[src])
        return apply_affine(colors, alpha, beta)

    return render(tr.gaussians, camera, appearance_fn=appearance_fn,
                  threads=tr.threads)


def evaluate_checkpoint(checkpoint_path, dataset: Optional[Dataset] = None,
                        protocol: str = "full"):
    """Evaluate a trained checkpoint.

    ``full``: raw renders scored over whole test images, plus mask IoU on
    train views. ``left-fit-right-eval``: per test view, a fresh image
    embedding is fitted on the left image half and metrics are computed on
    the right half only (raw render when the run had no appearance branch).
    """
    from .metrics import EvalReport

    if protocol not in ("full", "left-fit-right-eval"):
        raise ConfigError(f"unknown eval protocol {protocol!r}")
    t0 = time.time()
    tr = Trainer.from_checkpoint(checkpoint_path, dataset=dataset)
    count = len(tr.gaussians)
    rows = []
    for view in tr.dataset.test_views:
        if protocol == "full":
            img = render(tr.gaussians, view.camera, threads=tr.threads).image
            region = None
        else:
            h, w = view.image.shape[:2]
            cols = region_columns(w, "right")
            region = np.zeros((h, w), dtype=bool)
            region[:, cols] = True
            if tr.flags.appearance:
                emb = testtime_fit_embedding(
                    tr.gaussians, view.camera, tr.appearance,
                    tr.embed_table.mean_row(), view.image,
                    steps=tr.cfg.appearance.testtime_steps,
                    lr=tr.cfg.appearance.image_lr_testtime,
                    lambda_dssim=tr.cfg.loss.lambda_dssim)
                img = _affine_render(tr, view.camera, emb).image_aff
            else:
                img = render(tr.gaussians, view.camera,
                             threads=tr.threads).image
        rows.append(ViewRow(
            iteration=tr.iteration, view_id=view.view_id,
            psnr=psnr(img, view.image, region),
            ssim=ssim(img, view.image, region),
            gaussian_count=count))
    if tr.flags.mask:
        for view in tr.train_views:
            if view.oracle_mask is None:
                continue
            f_gt, _ = tr._gt_features(view, 1)
            pred = predict_mask(tr.mask_model, f_gt, view.image.shape[:2])
            iou = mask_iou(pred, view.oracle_mask)
            rows.append(ViewRow(
                iteration=tr.iteration, view_id=view.view_id,
                iou_static=iou.static, iou_transient=iou.transient,
                gaussian_count=count))
    return EvalReport(rows=rows, wall_clock_s=time.time() - t0)


def render_views(checkpoint_path, out_dir, dataset: Optional[Dataset] = None,
                 what=("raw",)) -> List[str]:
    """Render dataset views from a checkpoint to PNG files."""
    from PIL import Image

    tr = Trainer.from_checkpoint(checkpoint_path, dataset=dataset)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def save(name, img):
        path = out / name
        Image.fromarray(quantize(img)).save(path)
        written.append(str(path))

    for i, view in enumerate(tr.dataset.views):
        if "raw" in what:
            save(f"{view.view_id}_raw.png",
                 render(tr.gaussians, view.camera, threads=tr.threads).image)
        if "affine" in what and tr.flags.appearance:
            if view.split == "train":
                idx = [v.view_id for v in tr.train_views].index(view.view_id)
                emb = tr.embed_table.table[idx]
            else:
                emb = tr.embed_table.mean_row()
            save(f"{view.view_id}_affine.png",
                 _affine_render(tr, view.camera, emb).image_aff)
        if "mask-overlay" in what and tr.flags.mask and view.split == "train":
            f_gt, _ = tr._gt_features(view, 1)
            pred = predict_mask(tr.mask_model, f_gt, view.image.shape[:2])
            overlay = view.image.copy()
            tint = np.array([1.0, 0.1, 0.1])
            weight = (1.0 - pred)[:, :, None]
            overlay = (1 - 0.6 * weight) * overlay + 0.6 * weight * tint
            save(f"{view.view_id}_maskoverlay.png", overlay)
    return written


ABLATE_TOGGLES = ("mask", "dg", "mb", "mr", "appearance")


def run_ablation(cfg: RunConfig, toggles: List[str],
                 dataset: Optional[Dataset] = None) -> List[dict]:
    """Run the full 2^k toggle matrix with a shared seed.

    Every run starts from the all-off baseline preset with the requested
    toggles set explicitly; emits one row per combination with deltas
    against the all-off row.
    """
    import itertools

    for t in toggles:
        if t not in ABLATE_TOGGLES:
            raise ConfigError(f"unknown ablation toggle {t!r}")
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for bits in itertools.product([False, True], repeat=len(toggles)):
        combo = dict(zip(toggles, bits))
        name = "_".join(f"{t}{int(v)}" for t, v in combo.items()) or "base"
        run_cfg = dataclasses.replace(
            cfg, mode="3dgs-baseline",
            toggles=Toggles(**{t: combo.get(t) for t in ABLATE_TOGGLES}),
            out_dir=str(out_root / name))
        summary = train_run(run_cfg, dataset=dataset)
        rows.append({**combo, "name": name,
                     "mean_psnr": summary["final_mean_psnr"],
                     "mean_ssim": summary.get("final_mean_ssim"),
                     "gaussian_count": summary["gaussian_count"]})
    base_psnr = rows[0]["mean_psnr"]
    for r in rows:
        r["delta_psnr"] = (None if r["mean_psnr"] is None or base_psnr is None
                           else r["mean_psnr"] - base_psnr)
    import csv as _csv

    with open(out_root / "ablation.csv", "w", newline="",
              encoding="utf-8") as f:
        cols = list(toggles) + ["name", "mean_psnr", "mean_ssim",
                                "gaussian_count", "delta_psnr"]
        w = _csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in cols})
    return rows
