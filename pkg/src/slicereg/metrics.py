"""Registration and reconstruction quality metrics: ED, GD, PSNR, SSIM,
plus the per-sample evaluation report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import CountMismatch, ShapeMismatch
from .forward_model import PsfKernel, VolumeGrid, sample_slice
from .geometry import (
    PlaneExtent,
    euclidean_distance,
    geodesic_distance,
    transform_to_anchors,
)

PSNR_INF = float("inf")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"psnr {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * np.log10(peak ** 2 / mse)


def _gaussian_window_1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0,
         window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM with a separable Gaussian window, any dimensionality.

    Standard constants C1 = (0.01 peak)^2, C2 = (0.03 peak)^2.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim {a.shape} vs {b.shape}")
    win = _gaussian_window_1d(window_size, sigma)

    def filt(x):
        for ax in range(x.ndim):
            x = ndimage.correlate1d(x, win, axis=ax, mode="reflect")
        return x

    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _finite_mean_std(vals):
    finite = [v for v in vals if np.isfinite(v)]
    if not finite:
        return np.nan, np.nan, 0
    return float(np.mean(finite)), float(np.std(finite)), len(vals) - len(finite)


@dataclass
class EvalReport:
    """Per-slice metric table plus aggregates (means with stds, Table-style)."""

    ed_mm: list = field(default_factory=list)
    gd_rad: list = field(default_factory=list)
    slice_psnr: list = field(default_factory=list)
    slice_ssim: list = field(default_factory=list)
    volume_psnr: float = np.nan
    volume_ssim: float = np.nan

    def summary(self) -> dict:
        out = {}
        for name, vals in [("ed_mm", self.ed_mm), ("gd_rad", self.gd_rad),
                           ("slice_psnr", self.slice_psnr), ("slice_ssim", self.slice_ssim)]:
            mean, std, n_inf = _finite_mean_std(vals)
            out[name] = {"mean": mean, "std": std, "n": len(vals), "n_inf": n_inf}
        out["volume_psnr"] = self.volume_psnr
        out["volume_ssim"] = self.volume_ssim
        return out


def eval_registration(predicted, ground_truth, target_volume: VolumeGrid,
                      slices, ext: PlaneExtent) -> EvalReport:
    """ED/GD per slice plus resampled-vs-original slice PSNR/SSIM."""
    if not (len(predicted) == len(ground_truth) == len(slices)):
        raise CountMismatch(
            f"{len(predicted)} predictions, {len(ground_truth)} truths, {len(slices)} slices")
    rep = EvalReport()
    peak = max(float(target_volume.data.max()), 1e-6)
    for t_hat, t_gt, s in zip(predicted, ground_truth, slices):
        rep.ed_mm.append(euclidean_distance(transform_to_anchors(t_hat, ext),
                                            transform_to_anchors(t_gt, ext)))
        rep.gd_rad.append(geodesic_distance(t_hat.rotation, t_gt.rotation))
        psf = PsfKernel.default(ext.res_mm, s.thickness_mm)
        resampled = sample_slice(target_volume, t_hat, psf, ext, s.thickness_mm)
        rep.slice_psnr.append(psnr(resampled.pixels, s.pixels, peak))
        rep.slice_ssim.append(ssim(resampled.pixels, s.pixels, peak))
    return rep


def mean_ed(predicted, ground_truth, ext: PlaneExtent) -> float:
    if len(predicted) != len(ground_truth):
        raise CountMismatch(f"{len(predicted)} vs {len(ground_truth)}")
    return float(np.mean([
        euclidean_distance(transform_to_anchors(p, ext), transform_to_anchors(g, ext))
        for p, g in zip(predicted, ground_truth)]))


def distance_profile(predicted, ground_truth, ext: PlaneExtent,
                     bin_width_mm: float = 5.0) -> list:
    """Median ED with 25/75 percentile bands, binned by the ground-truth
    plane-center distance to the atlas origin.  Empty bins are omitted."""
    if len(predicted) != len(ground_truth):
        raise CountMismatch(f"{len(predicted)} vs {len(ground_truth)}")
    dists, eds = [], []
    for p, g in zip(predicted, ground_truth):
        dists.append(float(np.linalg.norm(g.translation)))
        eds.append(euclidean_distance(transform_to_anchors(p, ext),
                                      transform_to_anchors(g, ext)))
    dists, eds = np.asarray(dists), np.asarray(eds)
    rows = []
    if dists.size == 0:
        return rows
    n_bins = int(np.floor(dists.max() / bin_width_mm)) + 1
    for b in range(n_bins):
        mask = (dists >= b * bin_width_mm) & (dists < (b + 1) * bin_width_mm)
        if not mask.any():
            continue
        vals = eds[mask]
        rows.append({
            "bin_center_mm": (b + 0.5) * bin_width_mm,
            "n": int(mask.sum()),
            "median_ed_mm": float(np.median(vals)),
            "p25_ed_mm": float(np.percentile(vals, 25)),
            "p75_ed_mm": float(np.percentile(vals, 75)),
        })
    return rows
