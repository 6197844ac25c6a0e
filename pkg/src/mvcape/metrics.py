"""PSNR and SSIM for images in [0, peak]."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

INF_DB = math.inf  # sentinel for identical images
WINDOW = 8


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    d = (a - b).ravel()
    mse = math.fsum(d * d) / d.size
    if mse == 0.0:
        return INF_DB
    # via the RMS error so uniform offsets like 0.1 give round numbers
    return 20.0 * math.log10(peak / math.sqrt(mse))


def _gray(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=-1) if x.ndim == 3 else x


def ssim(a, b, peak: float = 1.0, window: int = WINDOW) -> float:
    """Mean SSIM over all uniform ``window`` x ``window`` patches (stride 1) of the
    channel-mean grayscale images, with population (1/n) statistics."""
    a, b = _pair(a, b)
    a, b = _gray(a), _gray(b)
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape} is smaller than the {window}x{window} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    wa = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = ((wa - mu_a[..., None, None]) * (wb - mu_b[..., None, None])).mean(axis=(-2, -1))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def finite_mean(values) -> float:
    vals = [v for v in values if math.isfinite(v)]
    return float(np.mean(vals)) if vals else math.nan


REPORT_COLUMNS = ("condition", "scene", "view", "psnr_db", "ssim")


@dataclass
class MetricReport:
    """Per-view scores grouped by a condition label (e.g. ``refs=3``)."""

    rows: list[tuple[str, int, int, float, float]] = field(default_factory=list)

    def add(self, condition: str, scene: int, view: int, pred, target) -> None:
        self.rows.append((condition, scene, view, psnr(pred, target), ssim(pred, target)))

    def conditions(self) -> list[str]:
        return list(dict.fromkeys(r[0] for r in self.rows))

    def mean_psnr(self, condition: str) -> float:
        """Mean over views and scenes; identical-image (infinite) scores excluded."""
        return finite_mean(r[3] for r in self.rows if r[0] == condition)

    def mean_ssim(self, condition: str) -> float:
        return float(np.mean([r[4] for r in self.rows if r[0] == condition]))

    def write_csv(self, path: str | os.PathLike) -> None:
        """Per-view rows, then one ``mean`` row per condition (scene = view = -1)."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(REPORT_COLUMNS)
            for c, s, v, p, q in self.rows:
                w.writerow([c, s, v, "inf" if math.isinf(p) else f"{p:.6f}", f"{q:.6f}"])
            for c in self.conditions():
                w.writerow([f"{c}:mean", -1, -1, f"{self.mean_psnr(c):.6f}", f"{self.mean_ssim(c):.6f}"])

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> MetricReport:
        rep = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                if row["condition"].endswith(":mean"):
                    continue
                rep.rows.append(
                    (row["condition"], int(row["scene"]), int(row["view"]), float(row["psnr_db"]), float(row["ssim"]))
                )
        return rep
