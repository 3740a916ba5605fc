"""Noise predictor: a small 3D convolutional U-Net with a time embedding.

Parameters live in a plain ordered dict of numpy arrays (``DenoiserParams``)
so the optimizer, checkpoints and finite-difference checks can treat them
uniformly.  Convolutions and gradients are computed with torch on CPU.

Conv weights are stored in torch layout ``(c_out, c_in, k_line, k_sample,
k_band)``.  :class:`Kernel2D` / :class:`Kernel3D` use the ``m x n (x l) x c_in
x c_out`` layout and are the input/output of :func:`inflate_2d_to_3d`.

Padding: reflect on the two spatial axes, replicate on the band axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, InflationError, NonFiniteError
from .rng import stream

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


# ---------------------------------------------------------------------------
# kernels and inflation


@dataclass(frozen=True)
class Kernel2D:
    weights: np.ndarray  # (m, n, c_in, c_out)
    bias: np.ndarray  # (c_out,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 4:
            raise DimensionError(f"2D kernel weights must be m x n x c_in x c_out, got {w.shape}")
        if w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
            raise ConfigError(f"2D kernel spatial size must be odd, got {w.shape[:2]}")
        if not np.all(np.isfinite(w)):
            raise ValueError("2D kernel has non-finite weights")
        b = np.asarray(self.bias, dtype=np.float64)
        if b.shape != (w.shape[3],):
            raise DimensionError(f"bias shape {b.shape} does not match c_out={w.shape[3]}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class Kernel3D:
    weights: np.ndarray  # (m, n, l, c_in, c_out)
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 5:
            raise DimensionError(f"3D kernel weights must be m x n x l x c_in x c_out, got {w.shape}")
        if any(k % 2 == 0 for k in w.shape[:3]):
            raise ConfigError(f"3D kernel sizes must be odd, got {w.shape[:3]}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64))

    def to_torch_layout(self) -> np.ndarray:
        return np.ascontiguousarray(self.weights.transpose(4, 3, 0, 1, 2))

    @classmethod
    def from_torch_layout(cls, weight: np.ndarray, bias: np.ndarray) -> "Kernel3D":
        return cls(np.asarray(weight).transpose(2, 3, 4, 1, 0), bias)


def inflate_2d_to_3d(k2: Kernel2D, l: int, mode: str = "normalized") -> Kernel3D:
    """Replicate a 2D kernel across ``l`` spectral taps.

    ``normalized`` puts ``W / l`` in every tap, so a spectrally constant input
    gives exactly the 2D response.  ``literal`` copies ``W`` into every tap
    (the average of ``l`` identical copies), scaling that response by ``l``.
    The bias is copied unchanged in both modes.
    """
    if not isinstance(l, (int, np.integer)) or l < 1 or l % 2 == 0:
        raise ConfigError(f"spectral depth l must be a positive odd integer, got {l}")
    if mode not in ("normalized", "literal"):
        raise ConfigError(f"inflation mode must be 'normalized' or 'literal', got {mode!r}")
    w = k2.weights
    tap = w / l if mode == "normalized" else w
    w3 = np.repeat(tap[:, :, None, :, :], l, axis=2)
    return Kernel3D(w3, k2.bias.copy())


# ---------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture of the noise predictor.

    ``channels`` gives the width of each resolution level; ``level_convs=1``
    with a single level yields the two-conv toy net used for gradient checks.
    """

    channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    time_dim: int = 16
    T: int = 1000
    level_convs: int = 2
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise ConfigError(f"channels must be a non-empty tuple of positive ints, got {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel}")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ConfigError(f"time_dim must be even and >= 2, got {self.time_dim}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.level_convs not in (1, 2):
            raise ConfigError("level_convs must be 1 or 2")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "kernel": self.kernel,
            "time_dim": self.time_dim,
            "T": self.T,
            "level_convs": self.level_convs,
            "dtype": self.dtype,
        }

    def conv_shapes(self) -> dict[str, tuple[int, int]]:
        """(c_in, c_out) of every conv layer, in forward order."""
        shapes = {}
        c_prev = 1
        for i, c in enumerate(self.channels):
            shapes[f"enc{i}.conv_a"] = (c_prev, c)
            if self.level_convs == 2:
                shapes[f"enc{i}.conv_b"] = (c, c)
            c_prev = c
        for i in reversed(range(len(self.channels) - 1)):
            shapes[f"dec{i}.conv"] = (self.channels[i + 1] + self.channels[i], self.channels[i])
        shapes["out.conv"] = (self.channels[0], 1)
        return shapes

    def min_extent(self) -> int:
        return 2 ** len(self.channels)


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    tensors: dict[str, np.ndarray]
    frozen: frozenset[str] = field(default_factory=frozenset)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.frozen)

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> "DenoiserParams":
        return DenoiserParams(self.config, dict(tensors), self.frozen)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.tensors) != list(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            if missing or extra:
                raise DimensionError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
            self.tensors = {k: self.tensors[k] for k in expected}
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise DimensionError(f"parameter {name}: shape {self.tensors[name].shape} != {shape}")
        unknown = set(self.frozen) - set(expected)
        if unknown:
            raise ConfigError(f"frozen names not in parameter set: {sorted(unknown)}")


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    k = cfg.kernel
    shapes: dict[str, tuple[int, ...]] = {}
    for name, (c_in, c_out) in cfg.conv_shapes().items():
        shapes[name + ".weight"] = (c_out, c_in, k, k, k)
        shapes[name + ".bias"] = (c_out,)
        if name.endswith("conv_a") and name.startswith("enc"):
            level = name.split(".")[0]
            shapes[f"{level}.temb.weight"] = (c_out, cfg.time_dim)
            shapes[f"{level}.temb.bias"] = (c_out,)
    return shapes


def init_params(cfg: DenoiserConfig, seed: int = 0) -> DenoiserParams:
    """He-normal conv weights, small time projections, zero biases."""
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        rng = stream(seed, "init", name)
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        elif ".temb." in name:
            tensors[name] = rng.standard_normal(shape) / math.sqrt(shape[1])
        else:
            fan_in = int(np.prod(shape[1:]))
            gain = 0.1 if name.startswith("out.") else math.sqrt(2.0)
            tensors[name] = rng.standard_normal(shape) * gain / math.sqrt(fan_in)
    return DenoiserParams(cfg, tensors)


def zero_params(cfg: DenoiserConfig) -> DenoiserParams:
    return DenoiserParams(cfg, {n: np.zeros(s) for n, s in param_shapes(cfg).items()})


def timestep_table(T: int, dim: int) -> np.ndarray:
    """Sinusoidal T x dim embedding table: [sin(t f_i), cos(t f_i)]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.arange(T)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


# ---------------------------------------------------------------------------
# forward / backward


def _pad(x: torch.Tensor, pl: int, ps: int, pb: int) -> torch.Tensor:
    # x: (N, C, L, S, B); replicate on bands, then reflect on (L, S)
    if pb:
        x = F.pad(x, (pb, pb, 0, 0, 0, 0), mode="replicate")
    if pl or ps:
        n, c, L, S, B = x.shape
        y = x.permute(0, 4, 1, 2, 3).reshape(n * B, c, L, S)
        y = F.pad(y, (ps, ps, pl, pl), mode="reflect")
        x = y.reshape(n, B, c, L + 2 * pl, S + 2 * ps).permute(0, 2, 3, 4, 1)
    return x


def _conv(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.conv3d(_pad(x, w.shape[2] // 2, w.shape[3] // 2, w.shape[4] // 2), w, b)


def _check(x: torch.Tensor, layer: int, name: str) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite activation after layer {layer} ({name})", where=layer)


def forward_torch(cfg: DenoiserConfig, p: Mapping[str, torch.Tensor], x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Batched forward on torch tensors: x is (N, L, S, B), t is (N,) long."""
    temb_table = torch.as_tensor(timestep_table(cfg.T, cfg.time_dim), dtype=x.dtype)
    emb = temb_table[t]
    h = x.unsqueeze(1)
    skips = []
    layer = 0
    n_levels = len(cfg.channels)
    for i in range(n_levels):
        if i > 0:
            h = F.avg_pool3d(h, 2)
        h = _conv(h, p[f"enc{i}.conv_a.weight"], p[f"enc{i}.conv_a.bias"])
        proj = emb @ p[f"enc{i}.temb.weight"].T + p[f"enc{i}.temb.bias"]
        h = F.silu(h + proj[:, :, None, None, None])
        _check(h, layer, f"enc{i}.conv_a")
        layer += 1
        if cfg.level_convs == 2:
            h = F.silu(_conv(h, p[f"enc{i}.conv_b.weight"], p[f"enc{i}.conv_b.bias"]))
            _check(h, layer, f"enc{i}.conv_b")
            layer += 1
        skips.append(h)
    for i in reversed(range(n_levels - 1)):
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = torch.cat([h, skips[i]], dim=1)
        h = F.silu(_conv(h, p[f"dec{i}.conv.weight"], p[f"dec{i}.conv.bias"]))
        _check(h, layer, f"dec{i}.conv")
        layer += 1
    out = _conv(h, p["out.conv.weight"], p["out.conv.bias"])
    _check(out, layer, "out.conv")
    return out.squeeze(1)


def _as_batch(params: DenoiserParams, xt, t):
    cfg = params.config
    x = np.asarray(xt)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"expected (L, S, B) or (N, L, S, B) input, got shape {x.shape}")
    spatial = x.shape[1:]
    m = cfg.min_extent() // 2
    if any(s % m or s // m < 2 for s in spatial):
        raise DimensionError(
            f"input extent {spatial} incompatible with {len(cfg.channels)} levels "
            f"(each axis must be a multiple of {m} and at least {2 * m})"
        )
    ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
    if ts.min() < 0 or ts.max() >= cfg.T:
        raise IndexError(f"timestep out of range [0, {cfg.T}): {ts.min()}..{ts.max()}")
    dtype = _DTYPES[cfg.dtype]
    return torch.as_tensor(x, dtype=dtype), torch.as_tensor(np.array(ts)), single


def torch_params(params: DenoiserParams, requires_grad: bool = False) -> dict[str, torch.Tensor]:
    dtype = _DTYPES[params.config.dtype]
    out = {}
    for k, v in params.tensors.items():
        tv = torch.tensor(v, dtype=dtype)
        tv.requires_grad_(requires_grad)
        out[k] = tv
    return out


def forward(params: DenoiserParams, xt, t) -> np.ndarray:
    """Predict the noise in ``xt`` at timestep ``t``; output has the input's shape."""
    x, ts, single = _as_batch(params, xt, t)
    with torch.no_grad():
        out = forward_torch(params.config, torch_params(params), x, ts).numpy()
    return out[0] if single else out


def backward(params: DenoiserParams, xt, t, upstream) -> dict[str, np.ndarray]:
    """Gradient of ``<forward(params, xt, t), upstream>`` w.r.t. every parameter.

    Frozen parameters get exactly-zero gradients.
    """
    x, ts, single = _as_batch(params, xt, t)
    up = np.asarray(upstream)
    if single:
        up = up[None]
    if up.shape != tuple(x.shape):
        raise DimensionError(f"upstream shape {up.shape} != input shape {tuple(x.shape)}")
    tp = torch_params(params, requires_grad=True)
    out = forward_torch(params.config, tp, x, ts)
    total = (out * torch.as_tensor(up, dtype=out.dtype)).sum()
    names = list(tp)
    grads = torch.autograd.grad(total, [tp[n] for n in names], allow_unused=True)
    result = {}
    for n, g in zip(names, grads):
        if g is None or n in params.frozen:
            result[n] = np.zeros_like(params.tensors[n])
        else:
            result[n] = g.numpy().astype(np.float64)
    return result


# ---------------------------------------------------------------------------
# Stage I: building a 3D parameter set from 2D weights


def random_2d_source(cfg: DenoiserConfig, seed: int = 0) -> dict[str, Kernel2D]:
    """A stand-in 2D conv weight set matching ``cfg``'s layer chain."""
    k = cfg.kernel
    src = {}
    for name, (c_in, c_out) in cfg.conv_shapes().items():
        rng = stream(seed, "2d-source", name)
        w = rng.standard_normal((k, k, c_in, c_out)) * math.sqrt(2.0 / (k * k * c_in))
        src[name] = Kernel2D(w, np.zeros(c_out))
    return src


def inflate_params(
    cfg: DenoiserConfig,
    source: Mapping[str, Kernel2D],
    mode: str = "normalized",
    seed: int = 0,
) -> DenoiserParams:
    """Inflate every conv layer of ``cfg`` from a 2D weight set.

    Layers absent from ``source`` and the time projections are randomly
    initialized from ``seed``.  A 2D kernel whose shape does not match the
    layer chain raises :class:`InflationError` naming the layer.
    """
    params = init_params(cfg, seed)
    tensors = dict(params.tensors)
    unknown = set(source) - set(cfg.conv_shapes())
    if unknown:
        raise InflationError(f"2D source has layers not in the 3D architecture: {sorted(unknown)}", sorted(unknown)[0])
    for name, (c_in, c_out) in cfg.conv_shapes().items():
        if name not in source:
            continue
        k2 = source[name]
        want = (cfg.kernel, cfg.kernel, c_in, c_out)
        if k2.weights.shape != want:
            raise InflationError(f"layer {name}: 2D kernel shape {k2.weights.shape}, architecture expects {want}", name)
        k3 = inflate_2d_to_3d(k2, cfg.kernel, mode)
        tensors[name + ".weight"] = k3.to_torch_layout()
        tensors[name + ".bias"] = k3.bias
    return replace(params, tensors=tensors)
