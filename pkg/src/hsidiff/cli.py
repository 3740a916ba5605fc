"""Command-line interface: ``hsid synth | train | destripe | eval | schedule-dump``.

Exit codes: 0 success, 1 runtime error, 2 usage error.  Every command writes
exactly one JSON run manifest next to its primary output.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import datacube as dc
from . import diffusion as df
from . import metrics as mt
from . import stripesynth as ss
from . import trainer as tr
from .augment import MixConfig
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .denoiser import DenoiserConfig, Kernel2D, inflate_params, init_params
from .errors import HsidError
from .rng import stream

log = logging.getLogger("hsidiff")

TOY = {"steps": 100, "batch_size": 4, "T": 100, "crop": 8, "lr0": 1e-3}


class CliError(HsidError):
    """Runtime failure reported with exit code 1."""


class UsageError(CliError):
    """Bad paths or flag combinations, reported with exit code 2."""


def _existing(path, flag: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: path not found: {p}")
    return p


# ---------------------------------------------------------------------------
# argument types


def _fraction_open_closed(name):
    def parse(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {text!r}") from None
        if not 0 < v <= 1:
            raise argparse.ArgumentTypeError(f"{name} must be in (0, 1], got {v}")
        return v

    return parse


def _positive(kind, name):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a {kind.__name__}, got {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"{name} must be > 0, got {v}")
        return v

    return parse


def _nonneg_int(name):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}") from None
        if v < 0:
            raise argparse.ArgumentTypeError(f"{name} must be >= 0, got {v}")
        return v

    return parse


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _stages(text):
    stages = [s.strip().upper() for s in text.split(",") if s.strip()]
    bad = [s for s in stages if s not in ("I", "II", "III")]
    if bad or not stages:
        raise argparse.ArgumentTypeError(f"stages must be a comma list of I, II, III; got {text!r}")
    return stages


# ---------------------------------------------------------------------------
# manifests


def _write_manifest(path: Path, command: str, args: argparse.Namespace, argv, started: float, extra: dict) -> Path:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": {k: v for k, v in config.items() if "seed" in k},
        "version": __version__,
        "started": _dt.datetime.fromtimestamp(started, _dt.timezone.utc).isoformat(),
        "wall_clock_s": round(time.time() - started, 3),
    }
    doc.update(extra)
    dc._atomic_write(path, json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")
    return path


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args, argv, started) -> int:
    out = Path(args.out)
    inputs = [_existing(p, "--in") for p in args.inputs]
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    pairs, sources = [], []
    for ci, hdr in enumerate(inputs):
        cube = dc.load_envi(hdr)
        record = None
        if not args.no_normalize:
            cube, record = dc.normalize(cube)
        cube_seed = int(stream(args.seed, "cube", ci).integers(0, 2**62))
        scfg = ss.StripeConfig(
            sigma=args.sigma,
            stripe_frequency=args.frequency,
            fragments_min=args.fragments_min,
            fragments_max=args.fragments_max,
            min_fragment_len=args.min_fragment_len,
            max_fragment_len=args.max_fragment_len,
            seed=cube_seed,
            axis=args.axis,
            absolute_sigma=args.absolute_sigma,
        )
        striped, realization = ss.synth_stripes(cube, scfg)
        clean_hdr = out / f"cube{ci:03d}_clean.hdr"
        striped_hdr = out / f"cube{ci:03d}_striped.hdr"
        dc.save_envi(cube, clean_hdr, "bsq")
        dc.save_envi(striped, striped_hdr, "bsq")
        man = ss.emit_pair_manifest(clean_hdr.name, striped_hdr.name, realization, scfg, out / f"cube{ci:03d}_stripes.json")
        sources.append({
            "input": str(hdr),
            "clean": clean_hdr.name,
            "striped": striped_hdr.name,
            "stripe_manifest": man.name,
            "shape": list(cube.shape),
            "band_range": record.to_dict() if record else None,
        })
        extent = args.extent
        if any(extent > d for d in cube.shape):
            raise CliError(f"--extent {extent} larger than cube {hdr} with shape {cube.shape}")
        for patch in dc.sample_patches(cube, args.n_patches, extent, seed=cube_seed, source_id=str(ci)):
            idx = patch.index
            pid = len(pairs)
            c_path = out / "pairs" / f"{pid:05d}_clean.hdr"
            s_path = out / "pairs" / f"{pid:05d}_striped.hdr"
            dc.save_envi(dc.HyperCube(patch.values), c_path)
            dc.save_envi(dc.HyperCube(striped.values[idx.slices()]), s_path)
            pairs.append({
                "id": pid,
                "source": ci,
                "index": [idx.line0, idx.sample0, idx.band0],
                "clean": str(c_path.relative_to(out)),
                "striped": str(s_path.relative_to(out)),
            })
    index = {"version": 1, "extent": args.extent, "n_pairs": len(pairs), "sources": sources, "pairs": pairs}
    dc._atomic_write(out / "index.json", json.dumps(index, indent=1, sort_keys=True) + "\n")
    _write_manifest(out / "manifest.json", "synth", args, argv, started, {"outputs": ["index.json"]})
    print(f"wrote {len(pairs)} pairs to {out / 'index.json'}")
    return 0


# ---------------------------------------------------------------------------
# train


def _load_pool(data_dir: Path, crop: int | None, need_striped: bool) -> tr.PatchPool:
    index_path = data_dir / "index.json" if data_dir.is_dir() else data_dir
    if not index_path.is_file():
        raise CliError(f"dataset index not found: {index_path}")
    index = json.loads(index_path.read_text())
    root = index_path.parent
    clean, striped = [], []
    for pair in index["pairs"]:
        c = dc.load_envi(root / pair["clean"]).values.astype(np.float64)
        s = dc.load_envi(root / pair["striped"]).values.astype(np.float64) if need_striped else None
        if crop:
            if crop > c.shape[0]:
                raise CliError(f"crop {crop} larger than dataset extent {c.shape[0]}")
            c = c[:crop, :crop, :crop]
            s = s[:crop, :crop, :crop] if s is not None else None
        clean.append(c)
        if s is not None:
            striped.append(s)
    if not clean:
        raise CliError(f"dataset {index_path} has no pairs")
    return tr.PatchPool(np.stack(clean), np.stack(striped) if need_striped else None)


def _load_2d_source(path: Path) -> dict[str, Kernel2D]:
    from .checkpoint import decode

    tensors = decode(path.read_bytes())
    src = {}
    for name in {k.rsplit(".", 1)[0] for k in tensors if k.endswith(".weight")}:
        src[name] = Kernel2D(tensors[name + ".weight"], tensors.get(name + ".bias", np.zeros(tensors[name + ".weight"].shape[-1])))
    return src


def cmd_train(args, argv, started) -> int:
    out = Path(args.out)
    stages = args.stages
    _existing(args.data, "--data")
    if args.data_ii:
        _existing(args.data_ii, "--data-ii")
    if args.toy:
        for key, val in TOY.items():
            if getattr(args, key) is None:
                setattr(args, key, val)
    steps = args.steps if args.steps is not None else 30000
    batch = args.batch_size if args.batch_size is not None else 32
    T = args.T if args.T is not None else 1000
    lr0 = args.lr0 if args.lr0 is not None else 1e-4
    crop = args.crop
    arch = DenoiserConfig(channels=tuple(args.channels), T=T, dtype=args.dtype)
    out.mkdir(parents=True, exist_ok=True)

    params = None
    if "II" not in stages and "III" in stages:
        prereq = Path(args.init_from) if args.init_from else out / "stageII.hsid"
        if not prereq.is_file():
            raise CliError(f"Stage III requires a Stage II checkpoint; missing prerequisite {prereq} (use --init-from)")
        bundle = load_checkpoint(prereq)
        if bundle.meta.get("stage") != "II":
            raise CliError(f"{prereq} is a stage {bundle.meta.get('stage')} checkpoint; Stage III requires Stage II")
        params = bundle.params
        if params.config.T != T or params.config.channels != arch.channels:
            raise CliError(
                f"checkpoint architecture {params.config.to_dict()} incompatible with requested "
                f"channels={list(arch.channels)}, T={T}"
            )
    elif "II" in stages or "I" in stages:
        if args.init_2d:
            params = inflate_params(arch, _load_2d_source(Path(args.init_2d)), args.inflate_mode, args.seed)
        else:
            params = init_params(arch, args.seed)
        save_checkpoint(out / "stageI.hsid", CheckpointBundle(params, {"stage": "I", "step": 0}))

    data = Path(args.data)
    pool3 = _load_pool(data, crop, need_striped=True) if "III" in stages else None
    data2 = Path(args.data_ii) if args.data_ii else data
    pool2 = _load_pool(data2, crop, need_striped=False) if ("II" in stages or args.data_ii) else None
    written = [str(out / "stageI.hsid")] if ("I" in stages or "II" in stages) else []
    mix = MixConfig(args.mix, args.mix_alpha, args.seed) if args.mix != "none" else None
    for stage in [s for s in ("II", "III") if s in stages]:
        pool = pool2 if stage == "II" else pool3
        scale = 1.0 if stage == "II" or pool2 is None else tr.scaled_lr_factor(len(pool3), len(pool2))
        cfg = tr.StageConfig(
            stage=stage,
            steps=steps,
            batch_size=batch,
            lr0=lr0,
            lr_scale=scale,
            seed=args.seed + (0 if stage == "II" else 1),
            T=T,
            mix=mix if stage == "III" else None,
            data=str(data2 if stage == "II" else data),
        )
        result = tr.run_stage(cfg, params, pool, out)
        params = result.params
        written.append(str(out / f"stage{stage}.hsid"))
    _write_manifest(out / "manifest.json", "train", args, argv, started, {"outputs": written})
    print("wrote " + ", ".join(written))
    return 0


# ---------------------------------------------------------------------------
# destripe


def write_pgm(path: Path, plane: np.ndarray) -> tuple[float, float]:
    """8-bit binary PGM (P5) using the plane's own min/max; returns them."""
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        img = np.round((plane.astype(np.float64) - lo) / (hi - lo) * 255.0)
    else:
        img = np.zeros(plane.shape)
    img = img.astype(np.uint8)
    header = f"P5\n{plane.shape[1]} {plane.shape[0]}\n255\n".encode("ascii")
    dc._atomic_write(path, header + img.tobytes())
    return lo, hi


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def cmd_destripe(args, argv, started) -> int:
    bundle = load_checkpoint(_existing(args.checkpoint, "--checkpoint"))
    params = bundle.params
    cube = dc.load_envi(_existing(args.inputs, "--in"))
    sched = df.make_schedule(params.config.T, args.beta_start, args.beta_end)
    work, record = (cube, None) if args.no_normalize else dc.normalize(cube)
    t_probe = args.t_probe if args.t_probe is not None else df.probe_timestep(sched, 0.05)
    t0 = args.t0 if args.t0 is not None else max(1, sched.T // 8)
    if args.mode == "residual" and t_probe >= sched.T:
        raise CliError(f"--t-probe {t_probe} out of range for T={sched.T}")
    rng = stream(args.seed, "destripe")
    result = df.destripe_cube(
        params, work, sched, args.extent, args.mode, t_probe=t_probe, t0=t0, stride=args.stride, rng=rng
    )
    if record is not None:
        result = dc.denormalize(result, record)
    out = Path(args.out)
    dc.save_envi(result, out, cube.interleave)
    pgm = {}
    if args.export_pgm:
        for b in args.bands or []:
            if not 0 <= b < cube.bands:
                raise CliError(f"--bands: band {b} out of range for {cube.bands} bands")
            for tag, src in (("input", cube), ("output", result)):
                p = out.with_name(f"{out.stem}_{tag}_band{b:03d}.pgm")
                lo, hi = write_pgm(p, src.values[:, :, b])
                pgm[p.name] = {"band": b, "min": lo, "max": hi}
    extra = {"outputs": [str(out)], "pgm": pgm, "t_probe": t_probe, "t0": t0}
    _write_manifest(out.with_suffix(".manifest.json"), "destripe", args, argv, started, extra)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# eval / schedule-dump


def cmd_eval(args, argv, started) -> int:
    ref = dc.load_envi(_existing(args.ref, "--ref"))
    test = dc.load_envi(_existing(args.test, "--test"))
    report = mt.evaluate(ref, test, data_range=args.data_range, window=args.window)
    out = Path(args.out)
    dc._atomic_write(out, json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    dc._atomic_write(out.with_suffix(".txt"), report.to_text())
    _write_manifest(out.with_suffix(".manifest.json"), "eval", args, argv, started, {"outputs": [str(out)]})
    print(report.to_text(), end="")
    return 0


def schedule_csv(sched: df.NoiseSchedule) -> str:
    rows = ["t,beta,alpha,alpha_bar"]
    rows += [f"{t},{b!r},{a!r},{ab!r}" for t, b, a, ab in sched.rows()]
    return "\n".join(rows) + "\n"


def cmd_schedule_dump(args, argv, started) -> int:
    sched = df.make_schedule(args.T, args.beta_start, args.beta_end)
    text = schedule_csv(sched)
    if args.out == "-":
        sys.stdout.write(text)
        print(json.dumps({"command": "schedule-dump", "argv": list(argv), "version": __version__}), file=sys.stderr)
        return 0
    out = Path(args.out)
    dc._atomic_write(out, text)
    _write_manifest(out.with_suffix(".manifest.json"), "schedule-dump", args, argv, started, {"outputs": [str(out)]})
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hsid", description="Hyperspectral stripe synthesis, 3D diffusion training and destriping.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="stripe clean cubes and cut patch pairs")
    p.add_argument("--in", dest="inputs", action="append", required=True, help="ENVI header (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frequency", type=_fraction_open_closed("--frequency"), default=0.15)
    p.add_argument("--sigma", type=_positive(float, "--sigma"), default=0.05)
    p.add_argument("--absolute-sigma", action="store_true")
    p.add_argument("--fragments-min", type=_positive(int, "--fragments-min"), default=1)
    p.add_argument("--fragments-max", type=_positive(int, "--fragments-max"), default=5)
    p.add_argument("--min-fragment-len", type=_fraction_open_closed("--min-fragment-len"), default=0.1)
    p.add_argument("--max-fragment-len", type=_fraction_open_closed("--max-fragment-len"), default=1.0)
    p.add_argument("--axis", choices=("lines", "samples"), default="lines")
    p.add_argument("--n-patches", type=_positive(int, "--n-patches"), default=64)
    p.add_argument("--extent", type=_positive(int, "--extent"), default=32)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run training stages")
    p.add_argument("--data", required=True, help="dataset directory or index.json (Stage III pairs)")
    p.add_argument("--data-ii", help="separate dataset for Stage II (default: --data)")
    p.add_argument("--out", required=True)
    p.add_argument("--stages", type=_stages, default=["I", "II", "III"])
    p.add_argument("--toy", action="store_true", help=f"small budget: {TOY}")
    p.add_argument("--steps", type=_nonneg_int("--steps"))
    p.add_argument("--batch-size", type=_positive(int, "--batch-size"))
    p.add_argument("--lr0", type=_positive(float, "--lr0"))
    p.add_argument("--T", type=_positive(int, "--T"))
    p.add_argument("--crop", type=_positive(int, "--crop"))
    p.add_argument("--channels", type=_int_list, default=[8, 16])
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-2d", help="checkpoint-format file of 2D kernels (m,n,c_in,c_out) per layer")
    p.add_argument("--inflate-mode", choices=("normalized", "literal"), default="normalized")
    p.add_argument("--init-from", help="Stage II checkpoint to fine-tune from")
    p.add_argument("--mix", choices=("none", "mixup", "cutmix"), default="mixup")
    p.add_argument("--mix-alpha", type=_positive(float, "--mix-alpha"), default=1.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("destripe", help="patch-wise destriping of a full cube")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="inputs", required=True)
    p.add_argument("--out", required=True, help="output ENVI header path")
    p.add_argument("--mode", choices=("residual", "iterative"), default="residual")
    p.add_argument("--t-probe", type=_nonneg_int("--t-probe"))
    p.add_argument("--t0", type=_nonneg_int("--t0"))
    p.add_argument("--extent", type=_positive(int, "--extent"), default=32)
    p.add_argument("--stride", type=_positive(int, "--stride"))
    p.add_argument("--beta-start", type=_positive(float, "--beta-start"), default=1e-4)
    p.add_argument("--beta-end", type=_positive(float, "--beta-end"), default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bands", type=_int_list)
    p.add_argument("--export-pgm", action="store_true")
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_destripe)

    p = sub.add_parser("eval", help="PSNR / SSIM / SAM report")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--data-range", type=_positive(float, "--data-range"))
    p.add_argument("--window", type=_positive(int, "--window"), default=mt.DEFAULT_WINDOW)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("schedule-dump", help="write the noise schedule as CSV")
    p.add_argument("--T", type=_positive(int, "--T"), default=1000)
    p.add_argument("--beta-start", type=_positive(float, "--beta-start"), default=1e-4)
    p.add_argument("--beta-end", type=_positive(float, "--beta-end"), default=0.02)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_schedule_dump)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 2 on usage errors, 0 for --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("HSID_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    started = time.time()
    try:
        return args.func(args, argv, started)
    except UsageError as exc:
        print(f"hsid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (HsidError, OSError, ValueError, IndexError) as exc:
        print(f"hsid {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
