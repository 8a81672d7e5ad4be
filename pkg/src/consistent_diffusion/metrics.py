"""PSNR and single-scale SSIM on float images in [0, 1].

Conventions (fixed so numbers compare across runs): channel-averaged,
peak 1.0, PSNR capped at 99 dB, SSIM with an 11x11 Gaussian window
(sigma 1.5), K1=0.01, K2=0.03, averaged over valid window positions.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, atomic_write, check_same_shape

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < peak**2 * 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return 10.0 * math.log10(peak**2 / mse)


def _gauss_window():
    x = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation over the last two axes, valid region only
    k = len(g)
    rows = sum(g[i] * img[..., i : img.shape[-2] - k + 1 + i, :] for i in range(k))
    return sum(g[i] * rows[..., :, i : rows.shape[-1] - k + 1 + i] for i in range(k))


def ssim(a, b, data_range: float = 1.0) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    check_same_shape(a, b)
    if min(a.shape[-2:]) < SSIM_WIN:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape}")
    g = _gauss_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(smap.mean())


@dataclass
class MetricResult:
    psnr: float
    ssim: float
    per_image: list[dict] = field(default_factory=list)


def evaluate(outputs, targets) -> MetricResult:
    per = [{"psnr": psnr(o, t), "ssim": ssim(o, t)} for o, t in zip(outputs, targets)]
    return MetricResult(float(np.mean([p["psnr"] for p in per])),
                        float(np.mean([p["ssim"] for p in per])), per)


def write_metrics_json(path, result: MetricResult, task: str, mode: str, seed: int) -> None:
    doc = {"task": task, "mode": mode, "psnr_mean": result.psnr, "ssim_mean": result.ssim,
           "per_image": result.per_image, "seed": seed}
    atomic_write(path, json.dumps(doc, indent=1, sort_keys=True))
