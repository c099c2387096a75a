"""Operator-facing command surface.

Subcommands: gen-data, train, finetune, sample, sweep-m, eval, ablate,
print-config. Exit codes: 0 success, 2 contract/config error, 3 I/O error,
4 numeric failure. FLOODSR_THREADS caps the numerical thread pools; output
directories are guarded by a lock file so only one command writes at a
time. Every command that writes also drops a run.json with the config
snapshot, seeds and package version.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time


def _apply_thread_cap():
    cap = os.environ.get("FLOODSR_THREADS")
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        print(f"floodsr: ignoring invalid FLOODSR_THREADS={cap!r}", file=sys.stderr)
        return
    # must land before numpy/torch initialize their pools
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


@contextlib.contextmanager
def _output_lock(directory):
    os.makedirs(directory, exist_ok=True)
    from .errors import ContractError

    lock_path = os.path.join(directory, ".floodsr.lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ContractError(
            f"{directory} is locked by another floodsr process "
            f"(stale? remove {lock_path})"
        )
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(OSError):
            os.unlink(lock_path)


def _write_run_artifacts(directory, command, cfg, extra=None):
    from . import __version__

    doc = {
        "command": command,
        "config": cfg,
        "version": __version__,
    }
    doc.update(extra or {})
    path = os.path.join(directory, "run.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---- commands -----------------------------------------------------------------


def cmd_gen_data(args):
    from .data import build_dataset

    with _output_lock(args.out):
        manifest = build_dataset(
            seed=args.seed,
            n_events=args.events,
            patch=args.patch,
            upscale=args.upscale,
            out_dir=args.out,
            domain=args.size,
            steps_per_event=args.steps,
            relax_iters=args.relax_iters,
        )
        _write_run_artifacts(args.out, "gen-data", vars(args))
    counts = manifest.counts()
    if counts["train"] == 0:
        print("warning: single event -> test split only, nothing to train on",
              file=sys.stderr)
    print(f"dataset: {args.out}")
    print(f"samples: train={counts['train']} test={counts['test']}")
    print(f"max_depth_cm: {manifest.max_depth:.2f}")
    print(f"cg_fg_mse_cm2: {manifest.cg_fg_mse:.4f}")
    return 0


def _load_cfg(args, require_dataset=True):
    from . import config as config_mod
    from .errors import ContractError

    cfg = config_mod.load_config(args.config) if args.config else config_mod.default_config()
    if getattr(args, "dataset", None):
        cfg["dataset"] = args.dataset
    if require_dataset and not cfg["dataset"]:
        raise ContractError("no dataset configured (config.dataset or --dataset)")
    return cfg


def cmd_train(args):
    from . import training

    cfg = _load_cfg(args)
    with _output_lock(args.out):
        _write_run_artifacts(args.out, "train", cfg, {"zero_dem": args.zero_dem})
        path = training.train(
            cfg, args.out, resume=args.resume, zero_dem=args.zero_dem,
            log_fn=lambda s: print(s, flush=True),
        )
    print(f"checkpoint: {path}")
    return 0


def cmd_finetune(args):
    from . import training

    cfg = _load_cfg(args)
    with _output_lock(args.out):
        _write_run_artifacts(
            args.out, "finetune", cfg,
            {"source": args.from_checkpoint, "steps": args.steps},
        )
        path = training.finetune(
            cfg, args.from_checkpoint, args.out, steps=args.steps,
            log_fn=lambda s: print(s, flush=True),
        )
    print(f"checkpoint: {path}")
    return 0


def cmd_sample(args):
    import numpy as np

    from . import fmap
    from .data import upsample_bilinear
    from .diffusion import SamplerConfig, sample
    from .errors import ContractError
    from .training import load_models, sample_patches

    models = load_models(args.checkpoint)
    header_cg, cg = fmap.read_single_channel(args.cg, fmap.KIND_DEPTH)
    header_dem, dem = fmap.read_single_channel(args.dem, fmap.KIND_ELEVATION)
    if dem.shape[0] % cg.shape[0] or dem.shape[1] % cg.shape[1]:
        raise ContractError("DEM size must be an integer multiple of the CG map")
    upscale = dem.shape[0] // cg.shape[0]
    if dem.shape[1] // cg.shape[1] != upscale:
        raise ContractError("anisotropic upscale factors are not supported")

    start = "random_noise" if args.start == "noise" else "truncated"
    m = args.m if args.m is not None else models.cfg["sampler"]["m"]
    steps = args.steps if args.steps is not None else min(
        models.cfg["sampler"]["infer_steps"],
        m if start == "truncated" and m > 0 else models.sched.T,
    )
    scfg = SamplerConfig(start=start, m=m, infer_steps=max(steps, 1), seed=args.seed)

    cg_up = upsample_bilinear(cg.astype(np.float64), upscale) if upscale > 1 else cg
    t0 = time.perf_counter()
    if models.mode == "pixel":
        cond = np.stack(
            [models.norm.normalize(cg_up), models.dem_scaler.normalize(dem)]
        )[None]
        sr = sample(models.unet, cond, models.sched, scfg, norm=models.norm)[0, 0]
    else:
        from .latent import LatentModels, latent_pipeline

        bundle = LatentModels(ae=models.ae, unet=models.unet, sched=models.sched,
                              norm=models.norm, dem_scaler=models.dem_scaler)
        sr = latent_pipeline(bundle, cg_up, dem, scfg,
                             cell_size=header_dem.cell_size_m).depths
    elapsed = time.perf_counter() - t0

    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    fmap.write_depth(args.out, np.maximum(sr, 0.0), header_dem.cell_size_m)
    print(f"wrote {args.out}")
    print(f"wall_clock_s: {elapsed:.3f}")
    return 0


def cmd_sweep_m(args):
    import numpy as np

    from .diffusion import SamplerConfig
    from .training import evaluate_models, load_models

    models = load_models(args.checkpoint)
    dataset = args.dataset or models.cfg["dataset"]
    T = models.sched.T
    grid = sorted({max(1, round(T / (2**k))) for k in range(0, 12) if T / (2**k) >= 1})

    full_cfg = SamplerConfig(start="random_noise", infer_steps=T, seed=args.seed)
    full, _, _ = evaluate_models(
        models, dataset, sampler_cfg=full_cfg, threshold_cm=args.threshold,
        sample_n=args.sample_n, seed=args.seed,
    )
    rows = []
    for m in grid:
        cfg_m = SamplerConfig(start="truncated", m=m, infer_steps=m, seed=args.seed)
        rep, _, _ = evaluate_models(
            models, dataset, sampler_cfg=cfg_m, threshold_cm=args.threshold,
            sample_n=args.sample_n, seed=args.seed,
        )
        pct = 100.0 * (rep.sr_fg_mse - full.sr_fg_mse) / full.sr_fg_mse
        rows.append({"m": m, "sr_fg_mse": rep.sr_fg_mse, "pct_vs_full": pct})

    print("m\tsr_fg_mse\tpct_vs_full")
    for row in rows:
        print(f"{row['m']}\t{row['sr_fg_mse']:.4f}\t{row['pct_vs_full']:+.2f}")
    print(f"full\t{full.sr_fg_mse:.4f}\t+0.00")

    chosen = None
    for row in rows:
        if row["pct_vs_full"] <= args.tolerance_pct:
            chosen = row["m"]
            break
    # MSE should not degrade as m grows; a 2x violation means trouble
    flagged = any(
        rows[i]["sr_fg_mse"] > 2.0 * min(r["sr_fg_mse"] for r in rows[i:])
        for i in range(len(rows))
    )
    if flagged:
        print("warning: sweep is non-monotone beyond noise (2x violation)",
              file=sys.stderr)
    if chosen is None:
        print("no m in the grid meets the tolerance; use full sampling")
        chosen_out = None
    else:
        print(f"smallest_m_within_{args.tolerance_pct:g}pct: {chosen}")
        chosen_out = int(chosen)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(
                {
                    "grid": rows,
                    "full_sr_fg_mse": full.sr_fg_mse,
                    "tolerance_pct": args.tolerance_pct,
                    "chosen_m": chosen_out,
                    "non_monotone": bool(flagged),
                },
                fh, indent=1, sort_keys=True,
            )
            fh.write("\n")
    return 0


def cmd_eval(args):
    from .metrics import evaluate_run

    report = evaluate_run(
        args.sr, args.fg, args.cg, threshold=args.threshold,
        sample_n=args.sample_n, seed=args.seed,
    )
    sys.stdout.write(report.to_table())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json())
            fh.write("\n")
    return 0


def cmd_ablate(args):
    from . import training

    cfg = _load_cfg(args)
    if args.steps is not None:
        cfg["train"]["steps"] = args.steps
    with _output_lock(args.out):
        _write_run_artifacts(args.out, "ablate", cfg)
        with_dir = os.path.join(args.out, "with_dem")
        without_dir = os.path.join(args.out, "without_dem")
        if args.baseline:
            with_ckpt = args.baseline
        else:
            with_ckpt = training.train(cfg, with_dir,
                                       log_fn=lambda s: print("[with-dem]", s, flush=True))
        without_ckpt = training.train(cfg, without_dir, zero_dem=True,
                                      log_fn=lambda s: print("[no-dem]", s, flush=True))

    rows = []
    for label, ckpt in (("with_dem", with_ckpt), ("without_dem", without_ckpt)):
        models = training.load_models(ckpt)
        report, _, _ = training.evaluate_models(
            models, cfg["dataset"], threshold_cm=cfg["eval"]["threshold_cm"],
            sample_n=args.sample_n, seed=cfg["eval"]["seed"],
        )
        rows.append((label, report))

    print("variant\tcg_fg_mse\tsr_fg_mse\tmse_pct_change")
    for label, rep in rows:
        print(f"{label}\t{rep.cg_fg_mse:.4f}\t{rep.sr_fg_mse:.4f}\t{rep.mse_pct_change:+.2f}")
    if args.out:
        doc = {label: rep.to_dict() for label, rep in rows}
        with open(os.path.join(args.out, "ablation.json"), "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_print_config(args):
    from . import config as config_mod

    cfg = config_mod.load_config(args.config) if args.config else config_mod.default_config()
    print(config_mod.config_json(cfg))
    return 0


# ---- parser ---------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="floodsr",
        description="diffusion super-resolution of coarse-grid flood maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate a synthetic catchment dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256, help="fine-grid domain size")
    p.add_argument("--upscale", type=int, default=4, choices=(2, 4, 8))
    p.add_argument("--events", type=int, default=5)
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--steps", type=int, default=20, help="mapping steps per event")
    p.add_argument("--relax-iters", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a diffusion model")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--zero-dem", action="store_true",
                   help="ablation: train with the DEM channel zeroed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="transfer-learn onto a new catchment")
    p.add_argument("--from-checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--steps", type=int, help="default: train.steps / 6")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="super-resolve one coarse-grid raster")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cg", required=True, help="coarse depth raster (FMAP)")
    p.add_argument("--dem", required=True, help="fine DEM raster (FMAP)")
    p.add_argument("--start", choices=("noise", "truncated"), default="truncated")
    p.add_argument("--m", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("sweep-m", help="find the smallest safe truncation point")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--tolerance-pct", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=30.0)
    p.add_argument("--sample-n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_m)

    p = sub.add_parser("eval", help="score SR rasters against references")
    p.add_argument("--sr", required=True)
    p.add_argument("--fg", required=True)
    p.add_argument("--cg", required=True)
    p.add_argument("--threshold", type=float, default=30.0)
    p.add_argument("--sample-n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="paired with/without-DEM comparison")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--steps", type=int)
    p.add_argument("--sample-n", type=int, default=64)
    p.add_argument("--baseline", help="existing with-DEM checkpoint to reuse")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("print-config", help="print the merged configuration")
    p.add_argument("--config")
    p.set_defaults(func=cmd_print_config)

    return parser


def main(argv=None):
    _apply_thread_cap()
    from .errors import ContractError, NumericError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"floodsr: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"floodsr: i/o error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"floodsr: numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
