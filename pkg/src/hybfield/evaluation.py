"""Image-quality metrics (PSNR, windowed SSIM) and held-out-view evaluation."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset, save_png
from .model import FieldParams
from .render import render_image

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    """-10 log10(MSE) over all pixels/channels, capped at 99 dB for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return -10.0 * np.log10(mse)


def _gaussian_kernel(size: int, sigma: float):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_channel(a, b, kernel, c1, c2):
    win = kernel.shape[0]
    wa = np.lib.stride_tricks.sliding_window_view(a, (win, win))
    wb = np.lib.stride_tricks.sliding_window_view(b, (win, win))
    mu1 = np.einsum("ijkl,kl->ij", wa, kernel)
    mu2 = np.einsum("ijkl,kl->ij", wb, kernel)
    e11 = np.einsum("ijkl,kl->ij", wa * wa, kernel)
    e22 = np.einsum("ijkl,kl->ij", wb * wb, kernel)
    e12 = np.einsum("ijkl,kl->ij", wa * wb, kernel)
    s11 = e11 - mu1 * mu1
    s22 = e22 - mu2 * mu2
    s12 = e12 - mu1 * mu2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Windowed SSIM (Gaussian 11x11, sigma 1.5), per channel then averaged,
    mean over valid windows only."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"images smaller than the {window}x{window} SSIM window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    kernel = _gaussian_kernel(window, sigma)
    if a.ndim == 2:
        return _ssim_channel(a, b, kernel, c1, c2)
    return float(np.mean([
        _ssim_channel(a[..., ch], b[..., ch], kernel, c1, c2) for ch in range(a.shape[-1])
    ]))


@dataclass
class MetricReport:
    split: str
    per_view: list  # dicts: {"view": i, "psnr": dB, "ssim": s}
    mean_psnr: float
    mean_ssim: float
    config_fingerprint: str
    timings: dict = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> dict:
        out = {
            "split": self.split,
            "per_view": self.per_view,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "config_fingerprint": self.config_fingerprint,
        }
        if include_timings:
            out["timings"] = self.timings
        return out


def evaluate(params: FieldParams, dataset: Dataset, config: RunConfig,
             out_dir=None) -> MetricReport:
    """Render every view deterministically, compute metrics, optionally write
    the report (CSV + JSON + per-view PNGs + a summary figure).

    Timings go to a separate sidecar so the report itself is byte-stable.
    """
    if len(dataset) == 0:
        raise ValueError(f"dataset split {dataset.split!r} is empty")
    per_view = []
    view_times = []
    t_start = time.perf_counter()
    renders = []
    for i, (cam, target) in enumerate(zip(dataset.cameras, dataset.targets)):
        t0 = time.perf_counter()
        img = render_image(params, cam, config.render.n_samples,
                           config.render.background_color,
                           scene_transform=dataset.scene_transform)
        view_times.append(time.perf_counter() - t0)
        renders.append(img)
        per_view.append({"view": i, "psnr": psnr(img, target), "ssim": ssim(img, target)})
    report = MetricReport(
        split=dataset.split,
        per_view=per_view,
        mean_psnr=float(np.mean([v["psnr"] for v in per_view])),
        mean_ssim=float(np.mean([v["ssim"] for v in per_view])),
        config_fingerprint=config.fingerprint(),
        timings={"total_s": time.perf_counter() - t_start, "per_view_s": view_times},
    )
    if out_dir is not None:
        write_report(report, renders, out_dir)
    return report


def write_report(report: MetricReport, renders, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["view", "psnr_db", "ssim"])
        for row in report.per_view:
            writer.writerow([row["view"], repr(row["psnr"]), repr(row["ssim"])])
        writer.writerow(["mean", repr(report.mean_psnr), repr(report.mean_ssim)])
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    with open(out_dir / "timings.json", "w") as fh:
        json.dump(report.timings, fh, indent=2)
        fh.write("\n")
    for i, img in enumerate(renders):
        save_png(out_dir / f"view_{i:03d}.png", img)
    from .figures import save_metric_bars

    save_metric_bars(report, out_dir / "metrics.png")
