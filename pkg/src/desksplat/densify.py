"""Adaptive density control (clone / split / prune / opacity reset) under a
delayed-growth schedule.

Before ``start_iter`` every call is a strict no-op: the Gaussian count and
values are untouched. Transient suppression reaches this module only
through the masked loss (masked pixels contribute no gradient, hence no
accumulated statistic); there is no separate mask gate here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError
from .rasterizer import GradAccumulator
from .scene import GaussianSet, logit

SPLIT_SCALE_SHRINK = 1.6
OPACITY_RESET_CEILING = 0.01


@dataclass(frozen=True)
class DensifySchedule:
    start_iter: int
    stop_iter: int
    interval: int = 100
    grad_threshold: float = 2e-4
    scale_split_frac: float = 0.01   # of scene extent; larger splats split
    min_opacity: float = 5e-3
    opacity_reset_interval: int = 0  # 0 disables resets
    max_gaussians: int = 4000
    max_screen_radius_px: Optional[float] = None

    def __post_init__(self):
        if not (0 < self.start_iter < self.stop_iter):
            raise ConfigError("require 0 < start_iter < stop_iter")
        if self.interval < 1:
            raise ConfigError("densify interval must be >= 1")

    def acts_at(self, iteration: int) -> bool:
        return (iteration >= self.start_iter and iteration < self.stop_iter
                and iteration % self.interval == 0)


@dataclass
class DensifyEdit:
    """Row bookkeeping for one densify pass, used to remap optimizer state."""

    keep: np.ndarray          # bool over old rows
    new_parents: np.ndarray   # old-row index for each appended row

    @property
    def changed(self) -> bool:
        return (not self.keep.all()) or len(self.new_parents) > 0


@dataclass
class DensifyReport:
    iteration: int
    acted: bool = False
    clones: int = 0
    splits: int = 0
    prunes: int = 0
    count_before: int = 0
    count_after: int = 0
    growth_capped: bool = False


def _identity_edit(n: int) -> DensifyEdit:
    return DensifyEdit(keep=np.ones(n, dtype=bool),
                       new_parents=np.zeros(0, dtype=np.int64))


def densify_step(gs: GaussianSet, accum: GradAccumulator,
                 sched: DensifySchedule, iteration: int, extent: float,
                 position_lr: float, rng: np.random.Generator
                 ) -> Tuple[GaussianSet, DensifyEdit, DensifyReport]:
    """One density-control pass.

    Splats whose mean accumulated positional-gradient norm exceeds the
    threshold are cloned (small ones; the copy is offset one position-lr
    step along the accumulated descent direction) or split (large ones; two
    children sampled from the parent's own distribution with scales shrunk
    by 1.6, parent removed). Low-opacity and oversized splats are pruned.
    The accumulator is reset by the caller via the returned edit.
    """
    n = len(gs)
    report = DensifyReport(iteration=iteration, count_before=n, count_after=n)
    if not sched.acts_at(iteration):
        return gs, _identity_edit(n), report
    report.acted = True

    mean_grads = accum.mean_grads()
    hot = mean_grads > sched.grad_threshold
    max_scale = np.exp(gs.log_scales).max(axis=1)
    small = max_scale < sched.scale_split_frac * extent
    clone_mask = hot & small
    split_mask = hot & ~small

    growth = int(clone_mask.sum()) + int(split_mask.sum())
    if growth and n + growth > sched.max_gaussians:
        report.growth_capped = True
        clone_mask = np.zeros(n, dtype=bool)
        split_mask = np.zeros(n, dtype=bool)
        growth = 0

    new_rows = []
    new_parents = []

    ci = np.flatnonzero(clone_mask)
    if len(ci):
        g3d = accum.grad3d_sum[ci] / np.maximum(accum.count[ci], 1)[:, None]
        norms = np.linalg.norm(g3d, axis=1, keepdims=True)
        direction = np.divide(g3d, norms, out=np.zeros_like(g3d),
                              where=norms > 0)
        offset = -position_lr * direction
        new_rows.append({
            "positions": gs.positions[ci] + offset,
            "rotations": gs.rotations[ci].copy(),
            "log_scales": gs.log_scales[ci].copy(),
            "opacity_logits": gs.opacity_logits[ci].copy(),
            "sh_coeffs": gs.sh_coeffs[ci].copy(),
            "embeddings": None if gs.embeddings is None else gs.embeddings[ci].copy(),
        })
        new_parents.append(ci)
        report.clones = len(ci)

    si = np.flatnonzero(split_mask)
    if len(si):
        from .scene import quat_to_rot

        for _ in range(2):
            eps = rng.standard_normal((len(si), 3))
            local = eps * np.exp(gs.log_scales[si])
            world = np.einsum("nij,nj->ni", quat_to_rot(gs.rotations[si]), local)
            new_rows.append({
                "positions": gs.positions[si] + world,
                "rotations": gs.rotations[si].copy(),
                "log_scales": gs.log_scales[si] - np.log(SPLIT_SCALE_SHRINK),
                "opacity_logits": gs.opacity_logits[si].copy(),
                "sh_coeffs": gs.sh_coeffs[si].copy(),
                "embeddings": None if gs.embeddings is None else gs.embeddings[si].copy(),
            })
            new_parents.append(si)
        report.splits = len(si)

    prune = gs.opacities < sched.min_opacity
    if sched.max_screen_radius_px is not None:
        prune |= accum.max_radius_px > sched.max_screen_radius_px
    keep = ~(prune | split_mask)
    report.prunes = int(prune.sum())

    fields = {}
    for name in ("positions", "rotations", "log_scales", "opacity_logits",
                 "sh_coeffs"):
        parts = [getattr(gs, name)[keep]] + [r[name] for r in new_rows]
        fields[name] = np.concatenate(parts, axis=0)
    emb = None
    if gs.embeddings is not None:
        emb = np.concatenate([gs.embeddings[keep]]
                             + [r["embeddings"] for r in new_rows], axis=0)
    out = GaussianSet(embeddings=emb, **fields)
    edit = DensifyEdit(
        keep=keep,
        new_parents=(np.concatenate(new_parents)
                     if new_parents else np.zeros(0, dtype=np.int64)))
    report.count_after = len(out)
    return out, edit, report


def opacity_reset(gs: GaussianSet, iteration: int,
                  sched: DensifySchedule) -> GaussianSet:
    """Clamp opacities above 0.01 down to 0.01 on the reset schedule."""
    if (sched.opacity_reset_interval <= 0
            or iteration < sched.start_iter
            or iteration % sched.opacity_reset_interval != 0):
        return gs
    ceiling = logit(OPACITY_RESET_CEILING)
    out = gs.copy()
    out.opacity_logits = np.minimum(out.opacity_logits, ceiling)
    return out
