"""Image quality metrics and exposure-recovery evaluation.

PSNR uses peak 1.0. SSIM follows the standard single-scale formulation:
grayscale conversion 0.299R + 0.587G + 0.114B, an 11x11 Gaussian window with
sigma 1.5, K1=0.01, K2=0.03, L=1, averaged over valid (unpadded) windows.

Exposure recovery is gauge-ambiguous by one additive constant, so the
report subtracts the mean offset between learned and ground-truth
log-exposures before computing RMSE.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError
from .synthdata import LN2

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
HIST_BINS = 50


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / mse) in dB; identical images give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    windows = sliding_window_view(img, kernel.shape)
    return np.einsum("hwij,ij->hw", windows, kernel)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows."""
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape != gb.shape:
        raise ArgumentError(f"image shapes differ: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < SSIM_WINDOW:
        raise ArgumentError(f"image {ga.shape} smaller than the "
                            f"{SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    mu_a = _filter_valid(ga, kernel)
    mu_b = _filter_valid(gb, kernel)
    var_a = _filter_valid(ga * ga, kernel) - mu_a * mu_a
    var_b = _filter_valid(gb * gb, kernel) - mu_b * mu_b
    cov = _filter_valid(ga * gb, kernel) - mu_a * mu_b
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class ExposureReport:
    learned: np.ndarray
    gt_log: Optional[np.ndarray]
    mean_offset: Optional[float]
    aligned_rmse: Optional[float]
    group_means: Optional[dict]     # gt EV -> mean aligned e'
    group_vars: Optional[dict]      # gt EV -> variance of learned e'
    hist_counts: np.ndarray
    hist_edges: np.ndarray

    def to_dict(self) -> dict:
        return {
            "per_image": [
                {"image_index": j, "e_prime": float(e),
                 "gt_log_exposure": None if self.gt_log is None
                 else float(self.gt_log[j])}
                for j, e in enumerate(self.learned)],
            "mean_offset": self.mean_offset,
            "aligned_rmse": self.aligned_rmse,
            "group_means": None if self.group_means is None
            else {repr(k): v for k, v in self.group_means.items()},
            "group_variances": None if self.group_vars is None
            else {repr(k): v for k, v in self.group_vars.items()},
            "histogram": {"counts": self.hist_counts.tolist(),
                          "bin_edges": self.hist_edges.tolist()},
        }


def exposure_report(learned, gt_ev=None, bins: int = HIST_BINS) -> ExposureReport:
    """Gauge-aligned exposure recovery summary plus a histogram of e'."""
    learned = np.asarray(learned, dtype=np.float64)
    counts, edges = np.histogram(learned, bins=bins)
    if gt_ev is None:
        return ExposureReport(learned=learned, gt_log=None, mean_offset=None,
                              aligned_rmse=None, group_means=None,
                              group_vars=None, hist_counts=counts,
                              hist_edges=edges)
    gt_ev = np.asarray(gt_ev, dtype=np.float64)
    if gt_ev.shape != learned.shape:
        raise ArgumentError("learned and ground-truth lists differ in length")
    gt_log = gt_ev * LN2
    offset = float(np.mean(learned - gt_log))
    aligned = learned - offset
    rmse = float(np.sqrt(np.mean((aligned - gt_log) ** 2)))
    group_means, group_vars = {}, {}
    for ev in sorted(set(gt_ev.tolist())):
        sel = gt_ev == ev
        group_means[ev] = float(np.mean(aligned[sel]))
        group_vars[ev] = float(np.var(learned[sel]))
    return ExposureReport(learned=learned, gt_log=gt_log, mean_offset=offset,
                          aligned_rmse=rmse, group_means=group_means,
                          group_vars=group_vars, hist_counts=counts,
                          hist_edges=edges)


def write_histogram_csv(path, report: ExposureReport) -> None:
    """bin_left, count rows for external plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "count"])
        for left, count in zip(report.hist_edges[:-1], report.hist_counts):
            writer.writerow([repr(float(left)), int(count)])


def ascii_histogram(report: ExposureReport, width: int = 40) -> str:
    """Terminal rendering of the learned log-exposure histogram."""
    lines = ["learned log-exposure histogram (count per bin):"]
    peak = max(int(report.hist_counts.max()), 1)
    for left, right, count in zip(report.hist_edges[:-1],
                                  report.hist_edges[1:],
                                  report.hist_counts):
        if count == 0:
            continue
        bar = "#" * max(1, round(width * count / peak))
        lines.append(f"  [{left:+.3f}, {right:+.3f})  {bar} {count}")
    return "\n".join(lines)
