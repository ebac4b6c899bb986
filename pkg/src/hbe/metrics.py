"""Restoration quality metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Metrics:
    psnr: float
    mse: float
    per_region: list | None = None


def compute_psnr(a, b, peak=255.0):
    """PSNR = 20 log10(peak / sqrt(MSE)); identical images report inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    psnr = float("inf") if mse == 0 else 20.0 * np.log10(peak / np.sqrt(mse))
    return Metrics(psnr=float(psnr), mse=mse)


def region_psnr(a, b, rects, peak=255.0):
    """PSNR per (top, left, height, width) rectangle."""
    out = []
    for top, left, height, width in rects:
        sub_a = np.asarray(a)[top:top + height, left:left + width]
        sub_b = np.asarray(b)[top:top + height, left:left + width]
        out.append(((top, left, height, width), compute_psnr(sub_a, sub_b, peak).psnr))
    return out
