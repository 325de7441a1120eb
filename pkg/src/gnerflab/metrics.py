"""Image-quality metrics and tabular reports.

PSNR uses peak 1.0 over [0,1] images with a 99 dB cap at zero error.
SSIM is the standard structural similarity with an 11x11 Gaussian window
(sigma 1.5), stabilizers for unit dynamic range, averaged over channels.
Reports are deterministic CSV files with per-condition aggregate rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fsio import atomic_write_text

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = (0.01 * 1.0) ** 2
_C2 = (0.03 * 1.0) ** 2


def psnr(a, b):
    """10*log10(1/MSE) over all pixels and channels, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _windowed_mean(img, window):
    k = window.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("hwij,ij->hw", win, window)


def ssim(a, b):
    """Mean local SSIM; accepts [H,W] or [H,W,3] images in [0,1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    window = _gaussian_window()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx = _windowed_mean(x, window)
        my = _windowed_mean(y, window)
        mxx = _windowed_mean(x * x, window)
        myy = _windowed_mean(y * y, window)
        mxy = _windowed_mean(x * y, window)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2 * mx * my + _C1) * (2 * cxy + _C2)
        den = (mx * mx + my * my + _C1) * (vx + vy + _C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass(frozen=True)
class MetricsRow:
    scene_id: str
    view_id: str
    condition: str
    eps: float
    psnr: float
    ssim: float

    def __post_init__(self):
        if not (0.0 < self.psnr <= PSNR_CAP):
            raise ValueError(f"PSNR {self.psnr} outside (0, {PSNR_CAP}]")
        if not (-1.0 <= self.ssim <= 1.0):
            raise ValueError(f"SSIM {self.ssim} outside [-1, 1]")


CSV_HEADER = "scene,view,condition,eps,psnr,ssim"


def write_report(rows, path):
    """Deterministic CSV: sorted data rows plus per-condition mean rows."""
    if not rows:
        raise ValueError("no metrics rows to report")
    ordered = sorted(rows, key=lambda r: (r.scene_id, str(r.view_id), r.condition))
    lines = [CSV_HEADER]
    for r in ordered:
        lines.append(f"{r.scene_id},{r.view_id},{r.condition},"
                     f"{r.eps:.6f},{r.psnr:.4f},{r.ssim:.6f}")
    for condition in sorted({r.condition for r in ordered}):
        group = [r for r in ordered if r.condition == condition]
        mp = float(np.mean([r.psnr for r in group]))
        ms = float(np.mean([r.ssim for r in group]))
        me = float(np.mean([r.eps for r in group]))
        lines.append(f"ALL,mean,{condition},{me:.6f},{mp:.4f},{ms:.6f}")
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path
