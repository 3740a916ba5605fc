"""Band-wise Mixup / CutMix for hyperspectral patches.

Both modes blend two patches with the same convex formula; they differ in
which bands are blended.  Mixup blends every band, CutMix blends a contiguous
spectral window covering a ``1 - lambda`` fraction of the bands.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datacube import CubePatch
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class MixConfig:
    mode: str = "mixup"
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("mixup", "cutmix"):
            raise ConfigError(f"mode must be 'mixup' or 'cutmix', got {self.mode!r}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")


def draw_lambda(cfg: MixConfig, rng: np.random.Generator) -> float:
    if cfg.mode == "cutmix":
        return float(rng.beta(cfg.alpha, cfg.alpha))
    return float(rng.uniform(0.0, 1.0))


def cutmix_window(bands: int, lam: float, rng: np.random.Generator) -> np.ndarray:
    """Contiguous band window of width ``round((1 - lam) * bands)``, at least 1."""
    width = int(min(bands, max(1, round((1.0 - lam) * bands))))
    start = int(rng.integers(0, bands - width + 1))
    return np.arange(start, start + width)


def mix_bands(x1, x2, lam: float, band_set=None):
    """Blend ``lam * x1 + (1 - lam) * x2`` on ``band_set`` (default all bands).

    Bands outside ``band_set`` are copied from ``x1`` unchanged.  Accepts
    ``CubePatch`` objects (returning a patch) or plain (L, S, B) arrays.
    """
    a = np.asarray(x1.values if isinstance(x1, CubePatch) else x1)
    b = np.asarray(x2.values if isinstance(x2, CubePatch) else x2)
    if a.shape != b.shape:
        raise DimensionError(f"cannot mix patches of shape {a.shape} and {b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    bands = a.shape[2]
    sel = np.arange(bands) if band_set is None else np.asarray(sorted(set(int(f) for f in band_set)), dtype=int)
    if sel.size and (sel.min() < 0 or sel.max() >= bands):
        raise IndexError(f"band_set out of range for {bands} bands")
    out = a.copy()
    if lam == 1.0:
        return _wrap(x1, out)
    if lam == 0.0:
        out[:, :, sel] = b[:, :, sel]
    else:
        mixed = lam * a[:, :, sel] + (1.0 - lam) * b[:, :, sel]
        # keep the blend inside [min, max] despite rounding
        out[:, :, sel] = np.clip(mixed, np.minimum(a[:, :, sel], b[:, :, sel]), np.maximum(a[:, :, sel], b[:, :, sel]))
    return _wrap(x1, out)


def _wrap(like, values: np.ndarray):
    return CubePatch(like.index, values, like.source_id) if isinstance(like, CubePatch) else values


def augment_pair(
    clean1: np.ndarray,
    noisy1: np.ndarray,
    clean2: np.ndarray,
    noisy2: np.ndarray,
    cfg: MixConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Apply one mix draw to a (clean, striped) pair so both stay aligned.

    Returns the mixed clean and striped arrays plus a record of the draw for
    the training log.
    """
    lam = draw_lambda(cfg, rng)
    bands = clean1.shape[2]
    window = cutmix_window(bands, lam, rng) if cfg.mode == "cutmix" else np.arange(bands)
    c = mix_bands(clean1, clean2, lam, window)
    n = mix_bands(noisy1, noisy2, lam, window)
    return c, n, {"mode": cfg.mode, "lambda": lam, "band0": int(window[0]), "width": int(window.size)}
