"""Synthetic stripe noise for pushbroom hyperspectral cubes.

Each band gets its own stripe realization: a base intensity, a clamped
per-band intensity factor, a Bernoulli subset of columns, and a set of
non-overlapping fragments per selected column.  Inside the fragments the
cube receives i.i.d. Gaussian noise scaled by the band's dynamic range and
intensity factor; every other voxel is left untouched.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datacube import HyperCube, _atomic_write
from .errors import ConfigError, FormatError
from .rng import stream

MANIFEST_VERSION = 1

FACTOR_FLOOR = 0.001
BASE_LOW, BASE_HIGH = 0.01, 0.3


@dataclass(frozen=True)
class StripeConfig:
    sigma: float = 0.05
    stripe_frequency: float = 0.15
    fragments_min: int = 1
    fragments_max: int = 5
    min_fragment_len: float = 0.1
    max_fragment_len: float = 1.0
    seed: int = 0
    # "lines": stripes run along the line axis, so a column is a fixed sample index
    axis: str = "lines"
    # sigma is a fraction of each band's dynamic range unless absolute
    absolute_sigma: bool = False
    placement_retries: int = 32

    def __post_init__(self):
        if not 0 < self.stripe_frequency <= 1:
            raise ConfigError(f"stripe_frequency must be in (0, 1], got {self.stripe_frequency}")
        if not (isinstance(self.fragments_min, int) and isinstance(self.fragments_max, int)):
            raise ConfigError("fragment bounds must be integers")
        if not 1 <= self.fragments_min <= self.fragments_max:
            raise ConfigError(
                f"need 1 <= fragments_min <= fragments_max, got {self.fragments_min}, {self.fragments_max}"
            )
        if not 0 < self.min_fragment_len <= self.max_fragment_len <= 1:
            raise ConfigError(
                "need 0 < min_fragment_len <= max_fragment_len <= 1, got "
                f"{self.min_fragment_len}, {self.max_fragment_len}"
            )
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if self.axis not in ("lines", "samples"):
            raise ConfigError(f"axis must be 'lines' or 'samples', got {self.axis!r}")
        if self.placement_retries < 1:
            raise ConfigError("placement_retries must be >= 1")


@dataclass
class BandStripes:
    band: int
    base_intensity: float
    factor: float
    noise_std: float  # std of the field on masked voxels: sigma * range * factor
    columns: list[int]
    fragments: dict[int, list[tuple[int, int]]]
    requested_fragments: dict[int, int] = field(default_factory=dict)


@dataclass
class StripeRealization:
    shape: tuple[int, int, int]
    axis: str
    bands: list[BandStripes]
    field: np.ndarray | None = None

    def mask(self) -> np.ndarray:
        """Boolean (lines, samples, bands) mask rebuilt from the fragment tables."""
        return realization_mask(self.shape, self.axis, self.bands)


def realization_mask(shape, axis: str, bands: list[BandStripes]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for bs in bands:
        for col, frags in bs.fragments.items():
            for start, length in frags:
                if axis == "lines":
                    mask[start : start + length, col, bs.band] = True
                else:
                    mask[col, start : start + length, bs.band] = True
    return mask


def draw_base_intensity(rng: np.random.Generator) -> float:
    return float(rng.uniform(BASE_LOW, BASE_HIGH))


def intensity_factor(base: float, rng: np.random.Generator | None = None, u: float | None = None) -> float:
    """``max(0.001, base - 0.05 + u)`` with ``u ~ U(0, 0.1)`` unless ``u`` is given."""
    if u is None:
        u = float(rng.uniform(0.0, 0.1))
    return max(FACTOR_FLOOR, base - 0.05 + u)


def select_columns(samples: int, frequency: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 < frequency <= 1:
        raise ConfigError(f"frequency must be in (0, 1], got {frequency}")
    return np.flatnonzero(rng.random(samples) < frequency)


def draw_fragment_count(cfg: StripeConfig, rng: np.random.Generator) -> int:
    return int(rng.integers(cfg.fragments_min, cfg.fragments_max + 1))


def _largest_gap(placed: list[tuple[int, int]], lines: int) -> tuple[int, int]:
    edges = sorted(placed)
    best = (0, 0)
    cursor = 0
    for start, length in edges + [(lines, 0)]:
        gap = start - cursor
        if gap > best[1]:
            best = (cursor, gap)
        cursor = max(cursor, start + length)
    return best


def fragment_column(
    lines: int, cfg: StripeConfig, rng: np.random.Generator, count: int | None = None
) -> list[tuple[int, int]]:
    """Place ``count`` (default: drawn) non-overlapping fragments in a column.

    Each fragment first tries ``cfg.placement_retries`` random positions; if
    all collide it is truncated to the largest free gap, or dropped when the
    column is full.  The result is sorted by start row.
    """
    if lines < 1:
        raise ValueError("lines must be >= 1")
    k = draw_fragment_count(cfg, rng) if count is None else count
    placed: list[tuple[int, int]] = []
    for _ in range(k):
        frac = rng.uniform(cfg.min_fragment_len, cfg.max_fragment_len)
        length = int(min(lines, max(1, round(frac * lines))))
        for _ in range(cfg.placement_retries):
            start = int(rng.integers(0, lines - length + 1))
            if all(start + length <= s or s + n <= start for s, n in placed):
                placed.append((start, length))
                break
        else:
            gap_start, gap_len = _largest_gap(placed, lines)
            if gap_len > 0:
                placed.append((gap_start, min(length, gap_len)))
    return sorted(placed)


def synth_stripes(cube: HyperCube, cfg: StripeConfig) -> tuple[HyperCube, StripeRealization]:
    """Add stripe noise to every band of ``cube``.

    Band ``b`` draws everything from the substream ``(cfg.seed, "stripes", b)``
    so the result does not depend on processing order.
    """
    values = cube.values
    lines, samples, bands = values.shape
    along, across = (lines, samples) if cfg.axis == "lines" else (samples, lines)
    out = values.copy()
    noise = np.zeros(values.shape, dtype=np.float64)
    records = []
    for b in range(bands):
        rng = stream(cfg.seed, "stripes", b)
        base = draw_base_intensity(rng)
        factor = intensity_factor(base, rng)
        cols = select_columns(across, cfg.stripe_frequency, rng)
        frags: dict[int, list[tuple[int, int]]] = {}
        requested: dict[int, int] = {}
        for col in cols:
            k = draw_fragment_count(cfg, rng)
            requested[int(col)] = k
            frags[int(col)] = fragment_column(along, cfg, rng, count=k)
        plane = values[:, :, b]
        scale = cfg.sigma if cfg.absolute_sigma else cfg.sigma * (float(plane.max()) - float(plane.min()))
        std = scale * factor
        bs = BandStripes(b, base, factor, std, [int(c) for c in cols], frags, requested)
        band_mask = realization_mask((lines, samples, 1), cfg.axis, [BandStripes(0, 0, 0, 0, [], frags)])[:, :, 0]
        n_masked = int(band_mask.sum())
        if n_masked and std > 0:
            # order of draws: row-major over the (lines, samples) plane
            g = rng.standard_normal(n_masked) * std
            noise[:, :, b][band_mask] = g
            out[:, :, b][band_mask] = (plane[band_mask].astype(np.float64) + g).astype(values.dtype)
        records.append(bs)
    realization = StripeRealization((lines, samples, bands), cfg.axis, records, noise)
    return cube.with_values(out), realization


# ---------------------------------------------------------------------------
# manifests


def manifest_dict(realization: StripeRealization, cfg: StripeConfig, clean: str = "", striped: str = "") -> dict:
    return {
        "version": MANIFEST_VERSION,
        "seed": cfg.seed,
        "clean": str(clean),
        "striped": str(striped),
        "shape": list(realization.shape),
        "config": asdict(cfg),
        "bands": [
            {
                "band": bs.band,
                "base_intensity": bs.base_intensity,
                "factor": bs.factor,
                "noise_std": bs.noise_std,
                "columns": list(bs.columns),
                "fragments": {str(c): [[s, n] for s, n in fr] for c, fr in bs.fragments.items()},
                "requested_fragments": {str(c): k for c, k in bs.requested_fragments.items()},
            }
            for bs in realization.bands
        ],
    }


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def emit_pair_manifest(
    clean: str | os.PathLike,
    striped: str | os.PathLike,
    realization: StripeRealization,
    cfg: StripeConfig,
    out_path: str | os.PathLike,
) -> Path:
    out_path = Path(out_path)
    text = json.dumps(manifest_dict(realization, cfg, clean, striped), sort_keys=True, indent=1)
    _atomic_write(out_path, text + "\n")
    return out_path


def load_manifest(path: str | os.PathLike) -> tuple[StripeConfig, StripeRealization]:
    try:
        doc = json.loads(Path(path).read_text())
        cfg = StripeConfig(**doc["config"])
        bands = [
            BandStripes(
                band=int(b["band"]),
                base_intensity=float(b["base_intensity"]),
                factor=float(b["factor"]),
                noise_std=float(b["noise_std"]),
                columns=[int(c) for c in b["columns"]],
                fragments={int(c): [(int(s), int(n)) for s, n in fr] for c, fr in b["fragments"].items()},
                requested_fragments={int(c): int(k) for c, k in b.get("requested_fragments", {}).items()},
            )
            for b in doc["bands"]
        ]
        shape = tuple(int(x) for x in doc["shape"])
    except KeyError as exc:
        raise FormatError(f"stripe manifest {path} missing key {exc.args[0]!r}", key=exc.args[0]) from None
    return cfg, StripeRealization(shape, cfg.axis, bands)
