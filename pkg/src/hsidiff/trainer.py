"""Adam, cosine learning-rate decay and the three-stage training procedure.

Stage I builds the 3D parameter set by inflating 2D weights (no optimizer
steps).  Stage II trains the noise predictor on clean patches with Gaussian
corruption of random strength; Stage III fine-tunes it on clean/striped
pairs, optionally with band-wise Mixup/CutMix.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import queue
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import diffusion as df
from .augment import MixConfig, augment_pair
from .checkpoint import CheckpointBundle, save_checkpoint
from .datacube import HyperCube, _atomic_write, sample_patches
from .denoiser import DenoiserConfig, DenoiserParams, Kernel2D, init_params, inflate_params
from .errors import ConfigError, DimensionError, DivergenceError, NonFiniteError
from .rng import stream
from .stripesynth import StripeConfig, synth_stripes

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e3
DIVERGENCE_PATIENCE = 100


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, tensors: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(a, dtype=np.float64) for k, a in tensors.items()},
                   {k: np.zeros_like(a, dtype=np.float64) for k, a in tensors.items()})

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {"step": np.array(float(self.step))}
        out.update({f"m.{k}": a for k, a in self.m.items()})
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out


def adam_step(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    frozen: frozenset[str] = frozenset(),
) -> tuple[OptimizerState, dict[str, np.ndarray]]:
    """Bias-corrected Adam update; returns new state and parameters."""
    step = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}", where=name)
        if name in frozen:
            new_m[name], new_v[name], new_p[name] = state.m[name], state.v[name], p
            continue
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        new_m[name], new_v[name] = m, v
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return OptimizerState(new_m, new_v, step), new_p


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if total < 1:
        raise ConfigError(f"total must be >= 1, got {total}")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


def scaled_lr_factor(stage_size: int, reference_size: int) -> float:
    """Dataset-size learning-rate multiplier: size ratio clipped to [0.1, 1]."""
    if reference_size < 1:
        raise ConfigError("reference dataset size must be >= 1")
    return float(min(1.0, max(0.1, stage_size / reference_size)))


# ---------------------------------------------------------------------------
# configuration and data


@dataclass
class StageConfig:
    stage: str = "II"
    steps: int = 30000
    batch_size: int = 32
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_scale: float = 1.0
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_max: float = df.STAGE2_SIGMA_MAX
    mix: MixConfig | None = None
    mix_prob: float = 0.5
    data: str = ""
    prefetch: int = 0

    def __post_init__(self):
        if self.stage not in ("I", "II", "III"):
            raise ConfigError(f"stage must be I, II or III, got {self.stage!r}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.mix_prob <= 1:
            raise ConfigError("mix_prob must be in [0, 1]")

    @property
    def effective_lr0(self) -> float:
        return self.lr0 * self.lr_scale

    def schedule(self) -> df.NoiseSchedule:
        return df.make_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mix"] = asdict(self.mix) if self.mix else None
        return d


@dataclass
class PatchPool:
    """In-memory training patches; ``striped`` is set for Stage III pools."""

    clean: np.ndarray  # (M, e, e, e)
    striped: np.ndarray | None = None

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=np.float64)
        if self.clean.ndim != 4 or len(self.clean) < 1:
            raise DimensionError(f"pool must be (M, e, e, e), got {self.clean.shape}")
        if self.striped is not None:
            self.striped = np.asarray(self.striped, dtype=np.float64)
            if self.striped.shape != self.clean.shape:
                raise DimensionError("clean and striped pools differ in shape")

    def __len__(self) -> int:
        return len(self.clean)

    @property
    def extent(self) -> int:
        return self.clean.shape[1]

    @classmethod
    def from_cube(cls, cube: HyperCube, n: int, extent: int, seed: int, stripes: StripeConfig | None = None):
        """Sample ``n`` patches; with ``stripes`` the cube is striped first and
        the same windows are cut from both versions."""
        idx = [p.index for p in sample_patches(cube, n, extent, seed)]
        clean = np.stack([cube.values[i.slices()] for i in idx])
        if stripes is None:
            return cls(clean)
        striped_cube, _ = synth_stripes(cube, stripes)
        return cls(clean, np.stack([striped_cube.values[i.slices()] for i in idx]))

    def order(self, seed: int) -> Iterator[int]:
        """Endless index stream: a fresh permutation every pass over the pool."""
        epoch = 0
        while True:
            yield from stream(seed, "epoch", epoch).permutation(len(self)).tolist()
            epoch += 1


def build_batch(
    cfg: StageConfig,
    pool: PatchPool,
    indices: list[int],
    step: int,
    sched: df.NoiseSchedule,
) -> tuple[list[df.DiffusionSample], list[dict]]:
    """Training samples for one step, drawn from the substream (seed, "step", step)."""
    rng = stream(cfg.seed, "step", step)
    batch, records = [], []
    for i in indices:
        t = int(rng.integers(0, sched.T))
        eps = rng.standard_normal(pool.clean.shape[1:])
        x0 = pool.clean[i]
        rec: dict = {"t": t}
        if cfg.stage == "III":
            if pool.striped is None:
                raise ConfigError("Stage III needs a pool with striped patches")
            noisy = pool.striped[i]
            if cfg.mix is not None and rng.random() < cfg.mix_prob:
                j = int(rng.integers(0, len(pool)))
                x0, noisy, mix_rec = augment_pair(x0, noisy, pool.clean[j], pool.striped[j], cfg.mix, rng)
                rec["mix"] = mix_rec
            corruption = noisy - x0
        else:
            sigma = float(rng.uniform(0.0, cfg.sigma_max))
            corruption = sigma * rng.standard_normal(x0.shape)
            rec["sigma"] = sigma
        batch.append(df.make_sample(x0, t, eps, sched, corruption))
        records.append(rec)
    return batch, records


def _batches(cfg: StageConfig, pool: PatchPool, sched: df.NoiseSchedule):
    order = pool.order(cfg.seed)
    for step in range(cfg.steps):
        idx = [next(order) for _ in range(cfg.batch_size)]
        yield build_batch(cfg, pool, idx, step, sched)


def _prefetched(gen, depth: int):
    """Run ``gen`` in a worker thread through a bounded queue, preserving order."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def work():
        try:
            for item in gen:
                q.put(item)
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=work, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


# ---------------------------------------------------------------------------
# stage and pipeline


@dataclass
class StageResult:
    params: DenoiserParams
    log: list[dict] = field(default_factory=list)
    optimizer: OptimizerState | None = None
    checkpoints: list[Path] = field(default_factory=list)


def run_stage(
    cfg: StageConfig,
    params: DenoiserParams,
    data: PatchPool,
    out_dir: str | Path | None = None,
) -> StageResult:
    """Train for ``cfg.steps`` Adam steps with cosine-decayed learning rate.

    With ``out_dir`` set, checkpoints are written every 10% of the steps and
    at the end, and the per-step log goes to ``stage<N>_log.csv``.
    """
    if cfg.stage == "I":
        raise ConfigError("Stage I has no optimizer steps; use inflate_params")
    if params.config.T != cfg.T:
        raise ConfigError(f"denoiser built for T={params.config.T}, stage configured with T={cfg.T}")
    sched = cfg.schedule()
    tensors = {k: v.copy() for k, v in params.tensors.items()}
    state = OptimizerState.zeros_like(tensors)
    entries: list[dict] = []
    written: list[Path] = []
    out = Path(out_dir) if out_dir is not None else None
    cadence = max(1, cfg.steps // 10)
    over = 0
    lr0 = cfg.effective_lr0

    batches = _batches(cfg, data, sched)
    if cfg.prefetch > 0:
        batches = _prefetched(batches, cfg.prefetch)
    for step, (batch, records) in enumerate(batches):
        current = DenoiserParams(params.config, tensors, params.frozen)
        loss, grads = df.training_loss(current, batch)
        if not math.isfinite(loss):
            raise NonFiniteError(f"stage {cfg.stage}: non-finite loss at step {step}", where=step)
        lr = cosine_lr(step, cfg.steps, lr0)
        state, tensors = adam_step(state, tensors, grads, lr, cfg.beta1, cfg.beta2, cfg.eps, params.frozen)
        entry = {"step": step, "loss": loss, "lr": lr, "stage": cfg.stage}
        mixes = [r["mix"] for r in records if "mix" in r]
        if mixes:
            entry["mix"] = ";".join(f"{m['mode']}:{m['lambda']:.6f}:{m['band0']}+{m['width']}" for m in mixes)
        entries.append(entry)
        over = over + 1 if loss > DIVERGENCE_LOSS else 0
        if over >= DIVERGENCE_PATIENCE:
            raise DivergenceError(
                f"stage {cfg.stage} diverged: loss > {DIVERGENCE_LOSS:g} for {over} steps "
                f"(step {step}, loss {loss:g}, lr {lr:g})"
            )
        if out is not None and (step + 1) % cadence == 0 and step + 1 < cfg.steps:
            p = DenoiserParams(params.config, tensors, params.frozen)
            written.append(_save(out / f"stage{cfg.stage}_step{step + 1:06d}.hsid", p, state, cfg, step + 1))
        if step % max(1, cfg.steps // 20) == 0:
            log.info("stage %s step %d/%d loss %.6f lr %.3g", cfg.stage, step, cfg.steps, loss, lr)

    final = DenoiserParams(params.config, tensors, params.frozen)
    if out is not None:
        written.append(_save(out / f"stage{cfg.stage}.hsid", final, state, cfg, cfg.steps))
        write_log_csv(out / f"stage{cfg.stage}_log.csv", entries)
    return StageResult(final, entries, state, written)


def _save(path: Path, params: DenoiserParams, state: OptimizerState, cfg: StageConfig, step: int) -> Path:
    meta = {"stage": cfg.stage, "step": step, "stage_config": cfg.to_dict()}
    return save_checkpoint(path, CheckpointBundle(params, meta, state.to_tensors()))


LOG_FIELDS = ("step", "loss", "lr", "stage", "mix")


def write_log_csv(path: str | Path, entries: list[dict]) -> Path:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for e in entries:
        w.writerow({"step": e["step"], "loss": repr(e["loss"]), "lr": repr(e["lr"]), "stage": e["stage"], "mix": e.get("mix", "")})
    path = Path(path)
    _atomic_write(path, buf.getvalue())
    return path


def run_pipeline(
    arch: DenoiserConfig,
    cfg2: StageConfig,
    cfg3: StageConfig,
    data2: PatchPool,
    data3: PatchPool,
    stage1_source: Mapping[str, Kernel2D] | None = None,
    inflate_mode: str = "normalized",
    init_seed: int = 0,
    out_dir: str | Path | None = None,
) -> dict:
    """Stage I inflation, Stage II denoising training, Stage III fine-tuning.

    Each stage's learning rate is multiplied by its dataset size relative to
    the Stage II pool, clipped to [0.1, 1].  Returns the per-stage results.
    """
    if stage1_source is None:
        params = init_params(arch, init_seed)
    else:
        params = inflate_params(arch, stage1_source, inflate_mode, init_seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _save(out / "stageI.hsid", params, OptimizerState.zeros_like(params.tensors), StageConfig(stage="I", steps=0, T=arch.T), 0)
    cfg2 = replace(cfg2, lr_scale=1.0)
    cfg3 = replace(cfg3, lr_scale=scaled_lr_factor(len(data3), len(data2)))
    r2 = run_stage(cfg2, params, data2, out)
    r3 = run_stage(cfg3, r2.params, data3, out)
    return {"I": params, "II": r2, "III": r3}
