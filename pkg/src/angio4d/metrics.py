"""Evaluation protocol: vessel Dice from thresholded MIPs, plus PSNR and
SSIM on novel-view renders, averaged over validation views x phases.

The Dice score is computed from the DYNAMIC component's maximum intensity
projection only (the sparse field is the vessel model); PSNR/SSIM compare
the composed render against the ground-truth full image.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from . import renderer
from .fields import DynamicField, VMGrid

__all__ = [
    "dsc",
    "vessel_mask_from_mip",
    "psnr",
    "ssim",
    "EvalReport",
    "evaluate",
]

PSNR_CAP_DB = 99.0


def dsc(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Dice similarity 2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError("mask shapes differ")
    denom = pred_mask.sum() + gt_mask.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(pred_mask, gt_mask).sum() / denom


def vessel_mask_from_mip(
    mip: np.ndarray,
    threshold: float = 0.5,
    policy: str = "fixed",
    gt_mask: np.ndarray | None = None,
):
    """Binary vessel mask from a max-intensity projection.

    The MIP is normalized to [0, 1] by its maximum (an all-zero MIP gives
    an empty mask), then thresholded.  ``policy="fixed"`` uses the given
    threshold; ``policy="sweep"`` scans thresholds 0.05..0.95 (step 0.05)
    and keeps the one maximizing Dice against ``gt_mask``.

    Returns (mask, threshold_used).
    """
    mip = np.asarray(mip, dtype=np.float64)
    if not np.all(np.isfinite(mip)) or mip.min() < 0:
        raise ValueError("MIP must be finite and nonnegative")
    peak = mip.max()
    if peak == 0.0:
        return np.zeros(mip.shape, dtype=bool), threshold
    norm = mip / peak
    if policy == "fixed":
        return norm >= threshold, threshold
    if policy == "sweep":
        if gt_mask is None:
            raise ValueError("sweep policy needs a ground-truth mask")
        best, best_t = None, None
        for t in np.arange(0.05, 0.951, 0.05):
            mask = norm >= t
            score = dsc(mask, gt_mask)
            if best is None or score > best:
                best, best_t = score, float(t)
        return norm >= best_t, best_t
    raise ValueError(f"unknown threshold policy {policy!r}")


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB against peak 1.0, capped at 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mse = np.mean((pred - target) ** 2)
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred: np.ndarray, target: np.ndarray, window_size: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM with the original constants.

    Gaussian window (11x11, sigma 1.5), C1 = 0.01^2, C2 = 0.03^2 for a
    dynamic range of 1; mean over valid (fully inside) window positions.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("image shapes differ")
    if min(pred.shape) < window_size:
        raise ValueError(f"images must be at least {window_size}x{window_size}")
    c1, c2 = 0.01**2, 0.03**2
    w = _gaussian_window(window_size, sigma)

    def filt(img):
        return fftconvolve(img, w, mode="valid")

    mu1, mu2 = filt(pred), filt(target)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = filt(pred * pred) - mu1_sq
    s2 = filt(target * target) - mu2_sq
    s12 = filt(pred * target) - mu12
    ssim_map = ((2 * mu12 + c1) * (2 * s12 + c2)) / ((mu1_sq + mu2_sq + c1) * (s1 + s2 + c2))
    return float(ssim_map.mean())


@dataclass
class EvalReport:
    """Per-(view, phase) scores plus aggregates."""

    rows: list[dict] = field(default_factory=list)
    threshold_policy: str = "fixed"
    training_minutes: float = 0.0

    def add(self, view: int, phase: int, dsc_value: float, psnr_db: float, ssim_value: float, threshold: float):
        self.rows.append(
            {
                "view": view,
                "phase": phase,
                "dsc": dsc_value,
                "psnr": psnr_db,
                "ssim": ssim_value,
                "threshold": threshold,
            }
        )

    def mean(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_dsc(self):
        return self.mean("dsc")

    @property
    def mean_psnr(self):
        return self.mean("psnr")

    @property
    def mean_ssim(self):
        return self.mean("ssim")

    def summary(self) -> dict:
        return {
            "mean_dsc": self.mean_dsc,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "n_rows": len(self.rows),
            "threshold_policy": self.threshold_policy,
            "training_minutes": self.training_minutes,
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(
                f, fieldnames=["view", "phase", "dsc", "psnr", "ssim", "threshold"]
            )
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)
            writer.writerow(
                {
                    "view": "mean",
                    "phase": "",
                    "dsc": self.mean_dsc,
                    "psnr": self.mean_psnr,
                    "ssim": self.mean_ssim,
                    "threshold": "",
                }
            )

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump({"summary": self.summary(), "rows": self.rows}, f, indent=2, sort_keys=True)


def evaluate(
    grid: VMGrid,
    dyn_field: DynamicField,
    dataset,
    view_indices,
    alpha: float | None = None,
    n_samples: int = 256,
    threshold_policy: str = "fixed",
    threshold: float = 0.5,
    training_minutes: float = 0.0,
) -> EvalReport:
    """Score every (validation view, phase) pair of a dataset.

    Renders with jitter off so results are deterministic.  Dice compares
    the dynamic component's thresholded MIP to the per-phase ground-truth
    vessel mask; PSNR/SSIM compare the composed render to the full image.
    """
    report = EvalReport(threshold_policy=threshold_policy, training_minutes=training_minutes)
    if alpha is None:
        alpha = float(dyn_field.encoding.n_bands)
    for view in view_indices:
        pose = dataset.poses[view]
        for phase in range(dataset.n_phases):
            def composed(x, _p=phase):
                sl, _ = grid.forward(x)
                ss, _ = dyn_field.forward(x, _p, alpha)
                return sl + ss

            def dynamic_only(x, _p=phase):
                ss, _ = dyn_field.forward(x, _p, alpha)
                return ss

            pred = renderer.render_view(composed, pose, dataset.detector, dataset.bounds, n_samples)
            mip = renderer.render_view(
                dynamic_only, pose, dataset.detector, dataset.bounds, n_samples, mip=True
            )
            gt_image = dataset.image(view, phase)
            gt_mask = dataset.vessel_mask(view, phase)
            pred_mask, used_t = vessel_mask_from_mip(
                mip, threshold=threshold, policy=threshold_policy, gt_mask=gt_mask
            )
            report.add(
                view,
                phase,
                dsc(pred_mask, gt_mask),
                psnr(pred, gt_image),
                ssim(pred, gt_image),
                used_t,
            )
    return report
