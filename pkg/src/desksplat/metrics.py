"""Quantitative evaluation: PSNR, SSIM, mask IoU, report assembly.

All metrics use dynamic range 1.0. ``region`` arguments are boolean HxW
masks (None = full image); evaluation regions come from the oracle or the
protocol split, never from predicted masks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ContractError
from .ssim import ssim_map

PSNR_CAP_DB = 99.0


def _region_mask(shape, region):
    if region is None:
        return np.ones(shape[:2], dtype=bool)
    region = np.asarray(region, dtype=bool)
    if region.shape != shape[:2]:
        raise ContractError("region mask shape mismatch")
    if not region.any():
        raise ContractError("empty evaluation region")
    return region


def psnr(a: np.ndarray, b: np.ndarray, region=None) -> float:
    """10 log10(1 / MSE) over the region; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    mask = _region_mask(a.shape, region)
    diff = (a - b)[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a: np.ndarray, b: np.ndarray, region=None) -> float:
    """Mean SSIM over the region (channels averaged)."""
    smap = ssim_map(a, b)
    mask = _region_mask(smap.shape, region)
    return float(smap[mask].mean())


def dssim(a: np.ndarray, b: np.ndarray, region=None) -> float:
    return (1.0 - ssim(a, b, region)) / 2.0


@dataclass
class MaskIou:
    static: float
    transient: float
    transient_defined: bool = True


def mask_iou(pred_soft: np.ndarray, oracle_static: np.ndarray,
             threshold: float = 0.5) -> MaskIou:
    """IoU of the thresholded mask against the oracle.

    ``pred_soft`` in [0,1] (1 = static), binarized at ``threshold``;
    ``oracle_static`` boolean. On an all-static oracle the transient IoU is
    undefined: reported as 1.0 when the prediction is >= 99% static, else
    0.0 with ``transient_defined=False``.
    """
    pred_soft = np.asarray(pred_soft, dtype=np.float64)
    oracle = np.asarray(oracle_static, dtype=bool)
    if pred_soft.shape != oracle.shape:
        raise ContractError("mask shape mismatch")
    pred = pred_soft >= threshold

    def iou(p, o):
        inter = np.count_nonzero(p & o)
        union = np.count_nonzero(p | o)
        return inter / union if union else 1.0

    static = iou(pred, oracle)
    if oracle.all():
        ok = np.count_nonzero(pred) >= 0.99 * pred.size
        return MaskIou(static=static, transient=1.0 if ok else 0.0,
                       transient_defined=False)
    return MaskIou(static=static, transient=iou(~pred, ~oracle))


@dataclass
class ViewRow:
    iteration: int
    view_id: str
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    iou_static: Optional[float] = None
    iou_transient: Optional[float] = None
    gaussian_count: int = 0


@dataclass
class EvalReport:
    rows: List[ViewRow] = field(default_factory=list)
    wall_clock_s: float = 0.0

    def mean_psnr(self) -> float:
        vals = [min(r.psnr, PSNR_CAP_DB) for r in self.rows if r.psnr is not None]
        return float(np.mean(vals)) if vals else math.nan

    def mean_ssim(self) -> float:
        vals = [r.ssim for r in self.rows if r.ssim is not None]
        return float(np.mean(vals)) if vals else math.nan

    def mean_iou_transient(self) -> float:
        vals = [r.iou_transient for r in self.rows if r.iou_transient is not None]
        return float(np.mean(vals)) if vals else math.nan

    def mean_iou_static(self) -> float:
        vals = [r.iou_static for r in self.rows if r.iou_static is not None]
        return float(np.mean(vals)) if vals else math.nan


METRICS_HEADER = ["iter", "view_id", "psnr", "ssim", "iou_static",
                  "iou_transient", "gaussian_count"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v) or v > PSNR_CAP_DB:
            v = PSNR_CAP_DB
        return repr(float(v))
    return str(v)


def write_metrics_csv(path, rows: List[ViewRow], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if not append:
            writer.writerow(METRICS_HEADER)
        for r in rows:
            writer.writerow([
                r.iteration, r.view_id, _fmt(r.psnr), _fmt(r.ssim),
                _fmt(r.iou_static), _fmt(r.iou_transient), r.gaussian_count,
            ])


def read_metrics_csv(path) -> List[ViewRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            rows.append(ViewRow(
                iteration=int(rec["iter"]),
                view_id=rec["view_id"],
                psnr=float(rec["psnr"]) if rec["psnr"] else None,
                ssim=float(rec["ssim"]) if rec["ssim"] else None,
                iou_static=float(rec["iou_static"]) if rec["iou_static"] else None,
                iou_transient=(float(rec["iou_transient"])
                               if rec["iou_transient"] else None),
                gaussian_count=int(rec["gaussian_count"]),
            ))
    return rows
