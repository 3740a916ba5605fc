"""Hyperspectral cube container, ENVI I/O, normalization and patch handling.

All in-memory cubes use canonical ``(line, sample, band)`` axis order.  The
on-disk interleave only matters inside :func:`load_envi` / :func:`save_envi`.
"""

from __future__ import annotations

import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CoverageError,
    DimensionError,
    FormatError,
    SizeError,
    UnsupportedError,
)
from .rng import stream

INTERLEAVES = ("bsq", "bil", "bip")

# ENVI data type codes accepted on input.
_ENVI_DTYPES = {4: np.dtype("float32"), 12: np.dtype("uint16")}

# interleave -> axis order of the stored array, in canonical axis numbers
# (0 = line, 1 = sample, 2 = band)
_STORED_AXES = {
    "bsq": (2, 0, 1),
    "bil": (0, 2, 1),
    "bip": (0, 1, 2),
}

_DATA_SUFFIXES = ("", ".img", ".raw", ".dat", ".bsq", ".bil", ".bip")


@dataclass(frozen=True)
class HyperCube:
    """A dense radiance cube in ``(lines, samples, bands)`` order.

    ``values`` is float32 for anything loaded from disk; float64 is allowed
    for in-memory work that needs the extra precision.
    """

    values: np.ndarray
    wavelengths: np.ndarray | None = None
    interleave: str = "bsq"

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise DimensionError(f"cube values must be 3D (lines, samples, bands), got shape {v.shape}")
        if min(v.shape) < 1:
            raise DimensionError(f"cube dimensions must be >= 1, got {v.shape}")
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float32)
        if not np.all(np.isfinite(v)):
            raise ValueError("cube contains non-finite values")
        object.__setattr__(self, "values", v)
        if self.interleave.lower() not in INTERLEAVES:
            raise ValueError(f"interleave must be one of {INTERLEAVES}, got {self.interleave!r}")
        object.__setattr__(self, "interleave", self.interleave.lower())
        if self.wavelengths is not None:
            wl = np.asarray(self.wavelengths, dtype=np.float64)
            if wl.shape != (v.shape[2],):
                raise DimensionError(f"{wl.size} wavelengths for {v.shape[2]} bands")
            if np.any(np.diff(wl) <= 0):
                raise ValueError("wavelengths must be strictly increasing")
            object.__setattr__(self, "wavelengths", wl)

    @property
    def lines(self) -> int:
        return self.values.shape[0]

    @property
    def samples(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray) -> "HyperCube":
        return HyperCube(values, wavelengths=self.wavelengths, interleave=self.interleave)


@dataclass(frozen=True)
class PatchIndex:
    line0: int
    sample0: int
    band0: int
    extent: int = 32

    def fits(self, shape: Sequence[int]) -> bool:
        starts = (self.line0, self.sample0, self.band0)
        return all(0 <= s and s + self.extent <= n for s, n in zip(starts, shape))

    def slices(self) -> tuple[slice, slice, slice]:
        e = self.extent
        return (
            slice(self.line0, self.line0 + e),
            slice(self.sample0, self.sample0 + e),
            slice(self.band0, self.band0 + e),
        )


@dataclass(frozen=True)
class CubePatch:
    index: PatchIndex
    values: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        e = self.index.extent
        if np.shape(self.values) != (e, e, e):
            raise DimensionError(f"patch values shape {np.shape(self.values)} != extent {e}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("patch contains non-finite values")


@dataclass(frozen=True)
class BandRange:
    """Per-band min/max record produced by :func:`normalize`."""

    mins: np.ndarray
    maxs: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.degenerate is None:
            object.__setattr__(self, "degenerate", self.maxs <= self.mins)

    def to_dict(self) -> dict:
        return {
            "min": [float(x) for x in self.mins],
            "max": [float(x) for x in self.maxs],
            "degenerate": [bool(x) for x in self.degenerate],
        }


# ---------------------------------------------------------------------------
# ENVI I/O


def _parse_header(text: str) -> dict[str, str]:
    if not text.lstrip().startswith("ENVI"):
        raise FormatError("header does not start with 'ENVI'", key="ENVI")
    out: dict[str, str] = {}
    # brace-delimited values may span lines
    text = re.sub(r"\{[^}]*\}", lambda m: m.group(0).replace("\n", " "), text)
    for raw in text.splitlines()[1:]:
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        if "=" not in line:
            raise FormatError(f"garbled header line: {line!r}", key=line.split()[0])
        key, value = line.split("=", 1)
        out[key.strip().lower()] = value.strip()
    return out


def _header_int(hdr: dict[str, str], key: str) -> int:
    if key not in hdr:
        raise FormatError(f"header is missing required key {key!r}", key=key)
    try:
        return int(hdr[key])
    except ValueError:
        raise FormatError(f"header key {key!r} is not an integer: {hdr[key]!r}", key=key) from None


def _find_data_file(header_path: Path) -> Path:
    stem = header_path.with_suffix("") if header_path.suffix.lower() == ".hdr" else header_path
    for suffix in _DATA_SUFFIXES:
        candidate = Path(str(stem) + suffix)
        if candidate.is_file() and candidate != header_path:
            return candidate
    raise FileNotFoundError(f"no binary data file found next to {header_path}")


def _parse_float_list(value: str) -> np.ndarray:
    return np.array([float(x) for x in value.strip("{} ").split(",") if x.strip()])


def load_envi(header_path: str | os.PathLike) -> HyperCube:
    """Read an ENVI header/raw pair into a canonical-order cube.

    Accepts data type 4 (float32) and 12 (uint16) in any of the three
    interleaves; uint16 is promoted to float32 without rescaling.
    """
    header_path = Path(header_path)
    hdr = _parse_header(header_path.read_text(encoding="ascii", errors="replace"))
    samples = _header_int(hdr, "samples")
    lines = _header_int(hdr, "lines")
    bands = _header_int(hdr, "bands")
    dtype_code = _header_int(hdr, "data type")
    if "interleave" not in hdr:
        raise FormatError("header is missing required key 'interleave'", key="interleave")
    interleave = hdr["interleave"].lower()
    if interleave not in INTERLEAVES:
        raise FormatError(f"unknown interleave {hdr['interleave']!r}", key="interleave")
    if dtype_code not in _ENVI_DTYPES:
        raise UnsupportedError(f"unsupported ENVI data type {dtype_code}; only 4 (float32) and 12 (uint16)")
    byte_order = _header_int(hdr, "byte order") if "byte order" in hdr else 0
    if byte_order not in (0, 1):
        raise FormatError(f"byte order must be 0 or 1, got {byte_order}", key="byte order")
    offset = _header_int(hdr, "header offset") if "header offset" in hdr else 0

    dtype = _ENVI_DTYPES[dtype_code].newbyteorder("<" if byte_order == 0 else ">")
    data_path = _find_data_file(header_path)
    raw = data_path.read_bytes()[offset:]
    expected = samples * lines * bands * dtype.itemsize
    if len(raw) != expected:
        raise SizeError(
            f"{data_path}: {len(raw)} bytes but header declares "
            f"{lines}x{samples}x{bands}x{dtype.itemsize} = {expected}"
        )
    flat = np.frombuffer(raw, dtype=dtype)
    dims = (lines, samples, bands)
    order = _STORED_AXES[interleave]
    stored = flat.reshape(tuple(dims[a] for a in order))
    canonical = np.transpose(stored, np.argsort(order)).astype(np.float32)

    wavelengths = None
    if "wavelength" in hdr:
        wavelengths = _parse_float_list(hdr["wavelength"])
    cube_values = np.ascontiguousarray(canonical)
    if not np.all(np.isfinite(cube_values)):
        raise FormatError(f"{data_path} contains non-finite values", key="data")
    return HyperCube(cube_values, wavelengths=wavelengths, interleave=interleave)


def _atomic_write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("ascii") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def data_path_for(header_path: str | os.PathLike) -> Path:
    header_path = Path(header_path)
    return header_path.with_suffix(".img")


def save_envi(cube: HyperCube, header_path: str | os.PathLike, interleave: str | None = None) -> Path:
    """Write ``cube`` as little-endian float32 with an ENVI header.

    The binary goes to ``<stem>.img`` next to the header; its path is returned.
    """
    header_path = Path(header_path)
    interleave = (interleave or cube.interleave).lower()
    if interleave not in INTERLEAVES:
        raise ValueError(f"interleave must be one of {INTERLEAVES}, got {interleave!r}")
    stored = np.transpose(cube.values, _STORED_AXES[interleave])
    payload = np.ascontiguousarray(stored, dtype="<f4").tobytes()
    lines = [
        "ENVI",
        "description = {hsidiff cube}",
        f"samples = {cube.samples}",
        f"lines = {cube.lines}",
        f"bands = {cube.bands}",
        "header offset = 0",
        "file type = ENVI Standard",
        "data type = 4",
        f"interleave = {interleave}",
        "byte order = 0",
    ]
    if cube.wavelengths is not None:
        lines.append("wavelength units = Nanometers")
        lines.append("wavelength = {" + ", ".join(repr(float(w)) for w in cube.wavelengths) + "}")
    data_path = data_path_for(header_path)
    try:
        _atomic_write(data_path, payload)
        _atomic_write(header_path, "\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write ENVI cube to {header_path}: {exc}") from exc
    return data_path


# ---------------------------------------------------------------------------
# normalization


def normalize(cube: HyperCube) -> tuple[HyperCube, BandRange]:
    """Map each band affinely onto [0, 1].

    Constant bands become all-zero and are flagged ``degenerate`` in the
    returned record rather than raising.
    """
    v = cube.values
    mins = v.min(axis=(0, 1)).astype(np.float64)
    maxs = v.max(axis=(0, 1)).astype(np.float64)
    rng = maxs - mins
    degenerate = rng <= 0
    scale = np.where(degenerate, 1.0, rng)
    out = (v.astype(np.float64) - mins) / scale
    out[:, :, degenerate] = 0.0
    return cube.with_values(out.astype(v.dtype)), BandRange(mins, maxs, degenerate)


def denormalize(cube: HyperCube, record: BandRange) -> HyperCube:
    rng = np.where(record.degenerate, 0.0, record.maxs - record.mins)
    out = cube.values.astype(np.float64) * rng + record.mins
    return cube.with_values(out.astype(cube.values.dtype))


def dynamic_range(cube: HyperCube, band: int) -> float:
    if not 0 <= band < cube.bands:
        raise IndexError(f"band {band} out of range for cube with {cube.bands} bands")
    plane = cube.values[:, :, band]
    return float(plane.max()) - float(plane.min())


# ---------------------------------------------------------------------------
# patches


def sample_patches(cube: HyperCube, n: int, extent: int = 32, seed: int = 0, source_id: str = "") -> list[CubePatch]:
    """Draw ``n`` patch positions uniformly over all valid start offsets."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if extent < 1 or any(extent > d for d in cube.shape):
        raise DimensionError(f"patch extent {extent} exceeds cube shape {cube.shape}")
    rng = stream(seed, "sample_patches")
    highs = [d - extent + 1 for d in cube.shape]
    starts = np.stack([rng.integers(0, h, size=n) for h in highs], axis=1)
    patches = []
    for l0, s0, b0 in starts:
        idx = PatchIndex(int(l0), int(s0), int(b0), extent)
        patches.append(CubePatch(idx, cube.values[idx.slices()].copy(), source_id))
    return patches


def _axis_starts(size: int, extent: int, stride: int) -> list[int]:
    starts = list(range(0, size - extent + 1, stride))
    if starts[-1] != size - extent:
        starts.append(size - extent)
    return starts


def tile_indices(shape: Sequence[int], extent: int, stride: int | None = None) -> list[PatchIndex]:
    """Patch grid covering every voxel of ``shape``; default stride is extent // 2."""
    if any(extent > d for d in shape):
        raise DimensionError(f"patch extent {extent} exceeds cube shape {tuple(shape)}")
    stride = stride or max(1, extent // 2)
    return [
        PatchIndex(l0, s0, b0, extent)
        for l0 in _axis_starts(shape[0], extent, stride)
        for s0 in _axis_starts(shape[1], extent, stride)
        for b0 in _axis_starts(shape[2], extent, stride)
    ]


def reassemble(
    patches: Iterable[tuple[PatchIndex, np.ndarray]],
    lines: int,
    samples: int,
    bands: int,
    return_counts: bool = False,
):
    """Mean-blend patch values back into a full cube."""
    acc = np.zeros((lines, samples, bands), dtype=np.float64)
    counts = np.zeros((lines, samples, bands), dtype=np.int64)
    for idx, values in patches:
        if not idx.fits(acc.shape):
            raise DimensionError(f"patch {idx} does not fit in cube {(lines, samples, bands)}")
        sl = idx.slices()
        acc[sl] += values
        counts[sl] += 1
    holes = np.argwhere(counts == 0)
    if len(holes):
        coord = tuple(int(c) for c in holes[0])
        raise CoverageError(f"voxel {coord} is not covered by any patch ({len(holes)} uncovered)", coord)
    cube = HyperCube(acc / counts)
    return (cube, counts) if return_counts else cube


# ---------------------------------------------------------------------------
# procedural scenes


def synthetic_scene(
    lines: int = 64,
    samples: int = 64,
    bands: int = 64,
    n_materials: int = 4,
    seed: int = 0,
    dtype=np.float64,
) -> HyperCube:
    """Smooth procedural scene: Gaussian-bump spectra mixed by smooth abundance maps.

    Values lie in [0, 1]; wavelengths span 400-2500 nm.
    """
    rng = stream(seed, "synthetic_scene")
    wl = np.linspace(400.0, 2500.0, bands)
    spectra = np.zeros((n_materials, bands))
    for m in range(n_materials):
        for _ in range(3):
            centre = rng.uniform(400.0, 2500.0)
            width = rng.uniform(120.0, 500.0)
            spectra[m] += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((wl - centre) / width) ** 2)
        spectra[m] += 0.05
    yy, xx = np.meshgrid(np.arange(lines), np.arange(samples), indexing="ij")
    logits = np.zeros((n_materials, lines, samples))
    for m in range(n_materials):
        for _ in range(3):
            cy, cx = rng.uniform(0, lines), rng.uniform(0, samples)
            s = rng.uniform(0.15, 0.4) * max(lines, samples)
            logits[m] += rng.uniform(0.5, 2.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    abund = np.exp(3.0 * logits)
    abund /= abund.sum(axis=0, keepdims=True)
    cube = np.einsum("mls,mb->lsb", abund, spectra)
    cube = (cube - cube.min()) / (cube.max() - cube.min())
    return HyperCube(cube.astype(dtype), wavelengths=wl)
