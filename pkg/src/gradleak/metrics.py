"""Frame-fidelity scoring: PSNR and Gaussian-windowed SSIM, computed
frame-wise at a common resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DimensionError
from .media import resize_frame

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03
_L = 255.0


@dataclass
class QualityReport:
    comparison_label: str
    per_frame: list = field(default_factory=list)  # (index, psnr_db, ssim)
    mean_psnr: float = float("nan")
    mean_ssim: float = float("nan")
    infinite_psnr_frames: int = 0
    ssim_channels: str = "rgb-averaged"

    def to_json(self):
        # Non-finite values (identical frames give +inf PSNR) are encoded as
        # strings so the report stays strict JSON.
        def num(v):
            v = float(v)
            return v if np.isfinite(v) else repr(v)

        return {
            "comparison_label": self.comparison_label,
            "per_frame": [
                {"frame": i, "psnr_db": num(p), "ssim": num(s)}
                for i, p, s in self.per_frame
            ],
            "mean_psnr": num(self.mean_psnr),
            "mean_ssim": num(self.mean_ssim),
            "infinite_psnr_frames": self.infinite_psnr_frames,
            "ssim_channels": self.ssim_channels,
        }


def psnr(a, b):
    """10*log10(255^2 / MSE) over all RGB samples; +inf for identical frames."""
    if a.pixels.shape != b.pixels.shape:
        raise DimensionError(f"psnr: {a.pixels.shape} vs {b.pixels.shape}")
    diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(_L * _L / mse)


def _gaussian_kernel(size=_SSIM_WINDOW, sigma=_SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2 * sigma * sigma))
    return k / k.sum()


def _windowed_mean(img, k):
    """Separable valid-mode Gaussian filtering of a 2-D array."""
    tmp = np.apply_along_axis(lambda m: np.convolve(m, k, mode="valid"), 0, img)
    return np.apply_along_axis(lambda m: np.convolve(m, k, mode="valid"), 1, tmp)


def _ssim_channel(x, y):
    k = _gaussian_kernel()
    c1 = (_K1 * _L) ** 2
    c2 = (_K2 * _L) ** 2
    mu_x = _windowed_mean(x, k)
    mu_y = _windowed_mean(y, k)
    xx = _windowed_mean(x * x, k) - mu_x * mu_x
    yy = _windowed_mean(y * y, k) - mu_y * mu_y
    xy = _windowed_mean(x * y, k) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def ssim(a, b):
    """Mean structural similarity over an 11x11 Gaussian window (sigma 1.5),
    averaged across the RGB channels.
    """
    if a.pixels.shape != b.pixels.shape:
        raise DimensionError(f"ssim: {a.pixels.shape} vs {b.pixels.shape}")
    if a.height < _SSIM_WINDOW or a.width < _SSIM_WINDOW:
        raise DimensionError(
            f"ssim needs frames of at least {_SSIM_WINDOW}x{_SSIM_WINDOW}, "
            f"got {a.height}x{a.width}"
        )
    xa = a.pixels.astype(np.float64)
    xb = b.pixels.astype(np.float64)
    return float(np.mean([_ssim_channel(xa[:, :, c], xb[:, :, c]) for c in range(3)]))


def score_sequences(a, b, label, resolution=128):
    """Per-frame PSNR/SSIM after resizing both sequences to a common
    resolution; +inf PSNR frames are excluded from the mean and counted.
    """
    if len(a) != len(b):
        raise DimensionError(f"frame counts differ: {len(a)} vs {len(b)}")
    report = QualityReport(comparison_label=label)
    finite = []
    for i, (fa, fb) in enumerate(zip(a.frames, b.frames)):
        ra = resize_frame(fa, resolution, resolution)
        rb = resize_frame(fb, resolution, resolution)
        p = psnr(ra, rb)
        s = ssim(ra, rb)
        report.per_frame.append((i, p, s))
        if np.isfinite(p):
            finite.append(p)
        else:
            report.infinite_psnr_frames += 1
    if report.per_frame:
        report.mean_ssim = float(np.mean([s for _, _, s in report.per_frame]))
        report.mean_psnr = float(np.mean(finite)) if finite else float("inf")
    return report


def report_to_csv_rows(report):
    rows = [("frame", "psnr_db", "ssim")]
    rows.extend((i, p, s) for i, p, s in report.per_frame)
    return rows
