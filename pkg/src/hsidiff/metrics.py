"""Full-reference quality metrics: PSNR, SSIM and spectral angle (SAM)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datacube import HyperCube
from .errors import DimensionError, UndefinedMetricError

DEFAULT_WINDOW = 7

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "MetricReport",
    "type": "object",
    "required": ["psnr_db", "psnr_infinite", "ssim", "sam_rad", "sam_deg", "config"],
    "properties": {
        "psnr_db": {"type": ["number", "null"]},
        "psnr_infinite": {"type": "boolean"},
        "ssim": {"type": "number", "minimum": -1, "maximum": 1},
        "sam_rad": {"type": "number", "minimum": 0, "maximum": math.pi},
        "sam_deg": {"type": "number", "minimum": 0, "maximum": 180},
        "sam_skipped_pixels": {"type": "integer", "minimum": 0},
        "per_band": {
            "type": "object",
            "required": ["psnr_db", "ssim"],
            "properties": {
                "psnr_db": {"type": "array", "items": {"type": ["number", "null"]}},
                "ssim": {"type": "array", "items": {"type": "number"}},
            },
        },
        "config": {
            "type": "object",
            "required": ["data_range", "window", "window_type"],
            "properties": {
                "data_range": {"type": "number", "exclusiveMinimum": 0},
                "window": {"type": "integer", "minimum": 1},
                "window_type": {"enum": ["uniform"]},
            },
        },
    },
}


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, HyperCube) else x, dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(ref, test, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the inputs are equal."""
    r, t = _values(ref), _values(test)
    _same_shape(r, t)
    if not data_range > 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    mse = float(np.mean((r - t) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def ssim(ref, test, data_range: float = 1.0, window: int = DEFAULT_WINDOW) -> float:
    """Mean SSIM over all valid ``window x window`` positions of a 2D plane.

    Local statistics use a uniform window and population (1/N) moments.  A
    plane smaller than the window shrinks the window to fit.
    """
    r, t = _values(ref), _values(test)
    _same_shape(r, t)
    if r.ndim != 2:
        raise DimensionError(f"ssim expects a 2D band plane, got shape {r.shape}")
    w = window
    if w > min(r.shape):
        w = min(r.shape)
        warnings.warn(f"plane {r.shape} smaller than SSIM window {window}; using {w}x{w}", stacklevel=2)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    rw = sliding_window_view(r, (w, w))
    tw = sliding_window_view(t, (w, w))
    mu_r = rw.mean(axis=(-2, -1))
    mu_t = tw.mean(axis=(-2, -1))
    var_r = ((rw - mu_r[..., None, None]) ** 2).mean(axis=(-2, -1))
    var_t = ((tw - mu_t[..., None, None]) ** 2).mean(axis=(-2, -1))
    cov = ((rw - mu_r[..., None, None]) * (tw - mu_t[..., None, None])).mean(axis=(-2, -1))
    num = (2 * mu_r * mu_t + c1) * (2 * cov + c2)
    den = (mu_r**2 + mu_t**2 + c1) * (var_r + var_t + c2)
    return float(np.mean(num / den))


def ssim_cube(ref, test, data_range: float = 1.0, window: int = DEFAULT_WINDOW) -> tuple[float, list[float]]:
    r, t = _values(ref), _values(test)
    _same_shape(r, t)
    per_band = [ssim(r[:, :, b], t[:, :, b], data_range, window) for b in range(r.shape[2])]
    return float(np.mean(per_band)), per_band


def sam_details(ref, test) -> tuple[float, int]:
    """Mean spectral angle in radians and the number of skipped zero-norm pixels."""
    r, t = _values(ref), _values(test)
    _same_shape(r, t)
    r2 = r.reshape(-1, r.shape[-1])
    t2 = t.reshape(-1, t.shape[-1])
    nr = np.linalg.norm(r2, axis=1)
    nt = np.linalg.norm(t2, axis=1)
    ok = (nr > 0) & (nt > 0)
    if not ok.any():
        raise UndefinedMetricError("SAM undefined: every pixel has a zero-norm spectrum")
    # half-angle form: exact 0 for parallel spectra, unlike arccos of a rounded cosine
    u = r2[ok] / nr[ok, None]
    v = t2[ok] / nt[ok, None]
    angles = 2.0 * np.arctan2(np.linalg.norm(u - v, axis=1), np.linalg.norm(u + v, axis=1))
    return float(np.mean(angles)), int((~ok).sum())


def sam(ref, test) -> float:
    return sam_details(ref, test)[0]


def default_data_range(ref) -> float:
    """1.0 for data already in [0, 1], otherwise the reference's max - min."""
    r = _values(ref)
    lo, hi = float(r.min()), float(r.max())
    if lo >= 0.0 and hi <= 1.0:
        return 1.0
    return (hi - lo) or 1.0


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    sam_rad: float
    sam_skipped_pixels: int = 0
    per_band_psnr: list[float] = field(default_factory=list)
    per_band_ssim: list[float] = field(default_factory=list)
    data_range: float = 1.0
    window: int = DEFAULT_WINDOW

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr_db)

    @property
    def sam_deg(self) -> float:
        return math.degrees(self.sam_rad)

    def to_dict(self) -> dict:
        def fin(x):
            return None if math.isinf(x) else x

        return {
            "psnr_db": fin(self.psnr_db),
            "psnr_infinite": self.psnr_infinite,
            "ssim": self.ssim,
            "sam_rad": self.sam_rad,
            "sam_deg": self.sam_deg,
            "sam_skipped_pixels": self.sam_skipped_pixels,
            "per_band": {
                "psnr_db": [fin(p) for p in self.per_band_psnr],
                "ssim": list(self.per_band_ssim),
            },
            "config": {"data_range": self.data_range, "window": self.window, "window_type": "uniform"},
        }

    def to_text(self) -> str:
        psnr_txt = "inf" if self.psnr_infinite else f"{self.psnr_db:.4f}"
        rows = [
            f"{'metric':<10}{'value':>14}",
            f"{'PSNR (dB)':<10}{psnr_txt:>14}",
            f"{'SSIM':<10}{self.ssim:>14.6f}",
            f"{'SAM (rad)':<10}{self.sam_rad:>14.6f}",
            f"{'SAM (deg)':<10}{self.sam_deg:>14.4f}",
        ]
        if self.per_band_psnr:
            rows.append("")
            rows.append(f"{'band':<6}{'PSNR (dB)':>12}{'SSIM':>12}")
            for b, (p, s) in enumerate(zip(self.per_band_psnr, self.per_band_ssim)):
                rows.append(f"{b:<6}{('inf' if math.isinf(p) else f'{p:.4f}'):>12}{s:>12.6f}")
        return "\n".join(rows) + "\n"


def evaluate(ref, test, data_range: float | None = None, window: int = DEFAULT_WINDOW) -> MetricReport:
    r, t = _values(ref), _values(test)
    _same_shape(r, t)
    if data_range is None:
        data_range = default_data_range(r)
    ssim_mean, ssim_bands = ssim_cube(r, t, data_range, window)
    sam_rad, skipped = sam_details(r, t)
    return MetricReport(
        psnr_db=psnr(r, t, data_range),
        ssim=ssim_mean,
        sam_rad=sam_rad,
        sam_skipped_pixels=skipped,
        per_band_psnr=[psnr(r[:, :, b], t[:, :, b], data_range) for b in range(r.shape[2])],
        per_band_ssim=ssim_bands,
        data_range=float(data_range),
        window=min(window, r.shape[0], r.shape[1]),
    )
