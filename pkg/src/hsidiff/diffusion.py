"""DDPM schedule, forward process, training loss, reverse sampler and the
two destriping inference modes.

Training samples carry an optional deterministic corruption ``C`` (Gaussian
noise of random strength for denoising pre-training, the stripe field for
fine-tuning).  The noised input is ``sqrt(ab) (x0 + C) + sqrt(1 - ab) eps``
and the regression target is the *total* noise relative to the clean patch,
``eps + sqrt(ab / (1 - ab)) C``, so ``xt = q_sample(x0, t, target)`` holds
exactly and the reverse sampler walks back to the clean patch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import denoiser as dn
from .datacube import CubePatch, HyperCube, reassemble, tile_indices
from .errors import ConfigError, DimensionError, NonFiniteError

STAGE2_SIGMA_MAX = 15.0 / 255.0
OVERFLOW_LIMIT = 1e6


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta: Sequence[float]) -> "NoiseSchedule":
        b = np.asarray(beta, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ConfigError("beta must be a non-empty 1D sequence")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ConfigError("every beta_t must lie in (0, 1)")
        a = 1.0 - b
        return cls(b, a, np.cumprod(a))

    def rows(self):
        for t in range(self.T):
            yield t, float(self.beta[t]), float(self.alpha[t]), float(self.alpha_bar[t])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ConfigError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def _check_t(t, sched: NoiseSchedule) -> None:
    ts = np.asarray(t)
    if ts.size and (ts.min() < 0 or ts.max() >= sched.T):
        raise IndexError(f"timestep {t} out of range [0, {sched.T})")


def _bcast(coef: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-sample coefficients (N,) broadcast against (N, ...) arrays."""
    coef = np.asarray(coef)
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


def q_sample(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward process: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    _check_t(t, sched)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    ab = sched.alpha_bar[np.asarray(t)]
    return _bcast(np.sqrt(ab), x0) * x0 + _bcast(np.sqrt(1.0 - ab), x0) * eps


def forward_chain(x0, t, sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Apply the one-step forward kernel t+1 times (steps 0..t) with fresh draws."""
    x = np.asarray(x0, dtype=np.float64).copy()
    for s in range(t + 1):
        x = math.sqrt(sched.alpha[s]) * x + math.sqrt(sched.beta[s]) * rng.standard_normal(x.shape)
    return x


@dataclass(frozen=True)
class DiffusionSample:
    x0: np.ndarray
    t: int
    eps: np.ndarray
    xt: np.ndarray


def make_sample(x0, t: int, eps, sched: NoiseSchedule, corruption=None) -> DiffusionSample:
    """Build a training sample; ``corruption`` is folded into the target noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if corruption is not None:
        ab = sched.alpha_bar[t]
        eps = eps + math.sqrt(ab / (1.0 - ab)) * np.asarray(corruption, dtype=np.float64)
    return DiffusionSample(x0, int(t), eps, q_sample(x0, t, eps, sched))


# ---------------------------------------------------------------------------
# noise predictors

def predict_eps(model, xt, t) -> np.ndarray:
    """``model`` is a DenoiserParams or any callable ``(xt, t) -> eps``."""
    if isinstance(model, dn.DenoiserParams):
        return dn.forward(model, xt, t)
    return np.asarray(model(np.asarray(xt, dtype=np.float64), np.asarray(t)), dtype=np.float64)


class ZeroEps:
    def __call__(self, xt, t):
        return np.zeros_like(xt)


class PerfectEpsOracle:
    """Returns the exact noise of ``xt`` relative to a known clean patch."""

    def __init__(self, clean, sched: NoiseSchedule):
        self.clean = np.asarray(clean, dtype=np.float64)
        self.sched = sched

    def __call__(self, xt, t):
        ab = self.sched.alpha_bar[np.asarray(t)]
        return (xt - _bcast(np.sqrt(ab), xt) * self.clean) / _bcast(np.sqrt(1.0 - ab), xt)


# ---------------------------------------------------------------------------
# loss


def _stack(batch: Sequence[DiffusionSample]):
    if not batch:
        raise ValueError("training batch is empty")
    shape = batch[0].xt.shape
    for s in batch:
        if s.xt.shape != shape or s.eps.shape != shape:
            raise DimensionError(f"inconsistent sample shapes in batch: {s.xt.shape} vs {shape}")
    xt = np.stack([s.xt for s in batch])
    eps = np.stack([s.eps for s in batch])
    ts = np.array([s.t for s in batch], dtype=np.int64)
    return xt, eps, ts


def training_loss(model, batch: Sequence[DiffusionSample]) -> tuple[float, dict[str, np.ndarray]]:
    """Mean over the batch of the per-sample MSE between target and predicted noise.

    Returns the loss and its exact gradient w.r.t. the denoiser parameters
    (empty for parameter-free predictors).
    """
    xt, eps, ts = _stack(batch)
    if not isinstance(model, dn.DenoiserParams):
        pred = predict_eps(model, xt, ts)
        return float(np.mean((pred - eps) ** 2)), {}
    return loss_and_grad(model, xt, ts, eps)


def loss_and_grad(params: "dn.DenoiserParams", xt: np.ndarray, ts: np.ndarray, target: np.ndarray):
    x, tt, _ = dn._as_batch(params, xt, ts)
    tp = dn.torch_params(params, requires_grad=True)
    pred = dn.forward_torch(params.config, tp, x, tt)
    diff = pred - torch.as_tensor(target, dtype=pred.dtype)
    loss = (diff * diff).mean()
    names = list(tp)
    grads = torch.autograd.grad(loss, [tp[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        if g is None or n in params.frozen:
            out[n] = np.zeros_like(params.tensors[n])
        else:
            out[n] = g.numpy().astype(np.float64)
    return float(loss.detach()), out


# ---------------------------------------------------------------------------
# sampling and inference


def posterior_mean(xt, eps_pred, t: int, sched: NoiseSchedule) -> np.ndarray:
    b, a, ab = sched.beta[t], sched.alpha[t], sched.alpha_bar[t]
    return (np.asarray(xt) - b / math.sqrt(1.0 - ab) * np.asarray(eps_pred)) / math.sqrt(a)


def p_sample_step(model, xt, t: int, sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1} with variance beta_t; no noise at t = 0."""
    _check_t(t, sched)
    xt = np.asarray(xt, dtype=np.float64)
    mean = posterior_mean(xt, predict_eps(model, xt, t), t, sched)
    out = mean + math.sqrt(sched.beta[t]) * rng.standard_normal(xt.shape) if t > 0 else mean
    peak = float(np.max(np.abs(out))) if out.size else 0.0
    if not np.isfinite(peak) or peak > OVERFLOW_LIMIT:
        raise NonFiniteError(f"sampler overflow at t={t}: max |x| = {peak:g}", where=t)
    return out


def probe_timestep(sched: NoiseSchedule, noise_std: float) -> int:
    """Timestep whose forward-noise std sqrt(1 - ab_t) is closest to ``noise_std``."""
    return int(np.argmin(np.abs(np.sqrt(1.0 - sched.alpha_bar) - noise_std)))


def destripe_residual(model, striped, t_probe: int, sched: NoiseSchedule):
    """One-shot: striped - sqrt(1 - ab_t) * eps_theta(striped, t)."""
    _check_t(t_probe, sched)
    is_patch = isinstance(striped, CubePatch)
    x = np.asarray(striped.values if is_patch else striped, dtype=np.float64)
    out = x - math.sqrt(1.0 - sched.alpha_bar[t_probe]) * predict_eps(model, x, t_probe)
    return CubePatch(striped.index, out, striped.source_id) if is_patch else out


def destripe_iterative(model, striped, t0: int, sched: NoiseSchedule, rng: np.random.Generator):
    """Noise the input through ``t0`` forward steps, then run ``t0`` reverse steps.

    ``t0 = 0`` returns the input unchanged.
    """
    if not 0 <= t0 <= sched.T:
        raise IndexError(f"t0 must be in [0, {sched.T}], got {t0}")
    is_patch = isinstance(striped, CubePatch)
    x = np.asarray(striped.values if is_patch else striped, dtype=np.float64)
    if t0 > 0:
        x = q_sample(x, t0 - 1, rng.standard_normal(x.shape), sched)
        for t in range(t0 - 1, -1, -1):
            x = p_sample_step(model, x, t, sched, rng)
    return CubePatch(striped.index, x, striped.source_id) if is_patch else x


def destripe_cube(
    model,
    cube: HyperCube,
    sched: NoiseSchedule,
    extent: int,
    mode: str = "residual",
    t_probe: int = 0,
    t0: int = 0,
    stride: int | None = None,
    rng: np.random.Generator | None = None,
) -> HyperCube:
    """Patch-wise destriping of a full cube with mean-blended reassembly."""
    if mode not in ("residual", "iterative"):
        raise ConfigError(f"mode must be 'residual' or 'iterative', got {mode!r}")
    if any(extent > d for d in cube.shape):
        raise DimensionError(f"patch extent {extent} larger than cube {cube.shape}")
    if mode == "iterative" and rng is None:
        raise ConfigError("iterative mode needs an rng")
    outputs = []
    for idx in tile_indices(cube.shape, extent, stride):
        patch = cube.values[idx.slices()].astype(np.float64)
        if mode == "residual":
            out = destripe_residual(model, patch, t_probe, sched)
        else:
            out = destripe_iterative(model, patch, t0, sched, rng)
        outputs.append((idx, out))
    merged = reassemble(outputs, *cube.shape)
    return cube.with_values(merged.values.astype(cube.values.dtype))
