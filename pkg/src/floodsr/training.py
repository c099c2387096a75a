"""Training loop, checkpoint lifecycle and checkpoint-driven evaluation.

One checkpoint file carries everything needed to resume bit-exactly:
model parameters, Adam moments and step count, the batch RNG state, the
experiment config, and the dataset normalization constants. Fine-tuning
starts from another checkpoint's parameters but a fresh optimizer and the
new dataset's normalization.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import config as config_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DemScaler, Normalization, PatchSet
from .diffusion import SamplerConfig, sample, training_loss
from .errors import ContractError, TrainingError
from .latent import Autoencoder, train_autoencoder
from .metrics import evaluate_arrays
from .nn.optim import FusedAdam
from .unet import Unet

CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "train_log.tsv"


def _fresh_rng(seed, stream):
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def _restore_rng(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def _model_identity(cfg):
    """The config subset that must match for parameters to be compatible."""
    return {
        "mode": cfg["mode"],
        "schedule": cfg["schedule"],
        "unet": cfg["unet"],
        "ae": {
            k: cfg["ae"][k] for k in ("spatial_factor", "latent_channels", "base_width")
        },
    }


@dataclass
class TrainedModels:
    """Inference-side view of a checkpoint."""

    cfg: dict
    mode: str
    unet: Unet
    ae: Autoencoder | None
    sched: object
    norm: Normalization
    dem_scaler: DemScaler
    zero_dem: bool
    step: int

    def conditioning_patches(self, patchset, indices, zero_dem=None):
        zero = self.zero_dem if zero_dem is None else zero_dem
        return patchset.conditioning(indices, zero_dem=zero)


class _LatentView:
    """Pre-encoded dataset arrays for latent-mode training."""

    def __init__(self, ae, patchset, batch=128):
        self.fine = _encode_batched(ae, patchset.fine, batch)
        z_cg = _encode_batched(ae, patchset.coarse, batch)
        z_dem = _encode_batched(ae, patchset.dem, batch)
        self.cond = np.concatenate([z_cg, z_dem], axis=1)
        self.dem_channels = z_dem.shape[1]

    def batch(self, rng, batch_size, zero_dem=False):
        idx = rng.integers(0, len(self.fine), size=batch_size)
        cond = self.cond[idx]
        if zero_dem:
            cond = cond.copy()
            cond[:, -self.dem_channels :] = 0.0
        return self.fine[idx], cond


def _encode_batched(ae, arrays, batch):
    outs = []
    for start in range(0, len(arrays), batch):
        outs.append(ae.encode(arrays[start : start + batch]))
    return np.concatenate(outs, axis=0)


def save_train_checkpoint(path, cfg, model, opt, rng, step, manifest, zero_dem,
                          ae=None, ae_stats=None):
    tensors = {f"unet.{k}": v for k, v in model.state_arrays().items()}
    tensors.update({f"adam.m.{k}": v.copy() for k, v in opt.state.first_moment.items()})
    tensors.update({f"adam.v.{k}": v.copy() for k, v in opt.state.second_moment.items()})
    meta = {
        "kind": "floodsr-train",
        "config": cfg,
        "zero_dem": bool(zero_dem),
        "step": int(step),
        "adam_step_count": int(opt.state.step_count),
        "rng_state": rng.bit_generator.state,
        "norm": {
            "max_depth": manifest.max_depth,
            "dem_min": manifest.dem_min,
            "dem_max": manifest.dem_max,
        },
        "ae": None,
    }
    if ae is not None:
        tensors.update({f"ae.{k}": v for k, v in ae.state_arrays().items()})
        meta["ae"] = {
            "config": ae.cfg.to_dict(),
            "latent_scale": ae.latent_scale,
            "stats": ae_stats or {},
        }
    save_checkpoint(path, meta, tensors)
    return path


def load_models(path):
    """Rebuild the trained models (and constants) from a checkpoint."""
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    if meta.get("kind") != "floodsr-train":
        raise ContractError(f"{path} is not a training checkpoint")
    cfg = config_mod.validate(config_mod.merged_defaults(meta["config"]))
    mode = cfg["mode"]
    model = Unet(config_mod.unet_config_from(cfg), seed=cfg["seed"])
    model.load_state(ckpt.tensors, prefix="unet.")
    ae = None
    if meta.get("ae"):
        ae = Autoencoder(config_mod.ae_config_from(cfg), seed=cfg["seed"])
        ae.load_state(ckpt.tensors, prefix="ae.")
        ae.latent_scale = float(meta["ae"]["latent_scale"])
    norm = Normalization(
        max_depth=meta["norm"]["max_depth"],
        out_range=config_mod.out_range_for(mode),
    )
    dem_scaler = DemScaler(meta["norm"]["dem_min"], meta["norm"]["dem_max"])
    return TrainedModels(
        cfg=cfg,
        mode=mode,
        unet=model,
        ae=ae,
        sched=config_mod.schedule_from(cfg),
        norm=norm,
        dem_scaler=dem_scaler,
        zero_dem=bool(meta.get("zero_dem")),
        step=int(meta["step"]),
    )


def train(cfg, out_dir, resume=None, init_checkpoint=None, steps_override=None,
          zero_dem=False, log_fn=None):
    """Run (or continue) diffusion training; returns the checkpoint path.

    resume: continue an interrupted run bit-exactly (same config required).
    init_checkpoint: transfer learning; load parameters only, start a fresh
    optimizer and step counter on the new dataset.
    """
    cfg = config_mod.validate(config_mod.merged_defaults(cfg))
    if resume and init_checkpoint:
        raise ContractError("resume and init_checkpoint are mutually exclusive")
    os.makedirs(out_dir, exist_ok=True)
    dataset_dir = cfg["dataset"]
    mode = cfg["mode"]
    patchset = PatchSet(dataset_dir, "train", config_mod.out_range_for(mode))
    sched = config_mod.schedule_from(cfg)
    total_steps = cfg["train"]["steps"] if steps_override is None else steps_override

    model = Unet(config_mod.unet_config_from(cfg), seed=cfg["seed"])
    ae = None
    ae_stats = None
    start_step = 0
    rng = _fresh_rng(cfg["seed"], 1)

    if resume:
        ckpt = load_checkpoint(resume)
        if _model_identity(ckpt.meta["config"]) != _model_identity(cfg):
            raise ContractError("checkpoint config does not match; refusing partial load")
        if bool(ckpt.meta.get("zero_dem")) != bool(zero_dem):
            raise ContractError("checkpoint DEM ablation flag does not match")
        model.load_state(ckpt.tensors, prefix="unet.")
        if ckpt.meta.get("ae"):
            ae = Autoencoder(config_mod.ae_config_from(cfg), seed=cfg["seed"])
            ae.load_state(ckpt.tensors, prefix="ae.")
            ae.latent_scale = float(ckpt.meta["ae"]["latent_scale"])
            ae_stats = ckpt.meta["ae"].get("stats")
        start_step = int(ckpt.meta["step"])
        rng = _restore_rng(ckpt.meta["rng_state"])
    elif init_checkpoint:
        source = load_models(init_checkpoint)
        if _model_identity(source.cfg) != _model_identity(cfg):
            raise ContractError("source checkpoint architecture does not match config")
        model.load_state({f"unet.{k}": v.data for k, v in source.unet.params.items()},
                         prefix="unet.")
        if source.ae is not None:
            ae = source.ae
            ae_stats = {"transferred": True}

    if mode == "latent" and ae is None:
        ae, ae_stats = train_autoencoder(
            patchset.fine,
            config_mod.ae_config_from(cfg),
            steps=cfg["ae"]["train_steps"],
            seed=cfg["seed"],
            lr=cfg["ae"]["lr"],
            batch_size=cfg["ae"]["batch_size"],
            recon_tolerance=cfg["ae"]["recon_tolerance"],
            log=log_fn,
        )

    data_view = _LatentView(ae, patchset) if mode == "latent" else patchset

    opt = FusedAdam(model.params, lr=cfg["train"]["lr"])
    if resume:
        ckpt = load_checkpoint(resume)
        first = {k[len("adam.m."):]: v for k, v in ckpt.tensors.items()
                 if k.startswith("adam.m.")}
        second = {k[len("adam.v."):]: v for k, v in ckpt.tensors.items()
                  if k.startswith("adam.v.")}
        opt.load_moments(first, second, int(ckpt.meta["adam_step_count"]))

    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)
    log_path = os.path.join(out_dir, LOG_NAME)
    manifest = patchset.manifest
    batch_size = cfg["train"]["batch_size"]

    if start_step >= total_steps:
        save_train_checkpoint(ckpt_path, cfg, model, opt, rng, start_step, manifest,
                              zero_dem, ae, ae_stats)
        return ckpt_path

    mode_flag = "a" if (resume and os.path.exists(log_path)) else "w"
    with open(log_path, mode_flag) as log:
        if mode_flag == "w":
            log.write("step\tloss\n")
        for step in range(start_step, total_steps):
            fine, cond = data_view.batch(rng, batch_size, zero_dem=zero_dem)
            model.zero_grads()
            loss = training_loss(model, fine, cond, sched, rng)
            loss.backward()
            opt.step()
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss diverged at step {step}")
            done = step + 1
            if done % cfg["train"]["log_every"] == 0 or done == total_steps:
                log.write(f"{done}\t{value:.6f}\n")
                log.flush()
                if log_fn is not None:
                    log_fn(f"step {done}/{total_steps} loss {value:.5f}")
            if done % cfg["train"]["checkpoint_every"] == 0 or done == total_steps:
                save_train_checkpoint(ckpt_path, cfg, model, opt, rng, done, manifest,
                                      zero_dem, ae, ae_stats)
    return ckpt_path


def finetune(cfg, source_checkpoint, out_dir, steps=None, log_fn=None):
    """Transfer learning: continue from source parameters on a new dataset.

    The optimizer restarts from zero moments; the default step budget is a
    sixth of the configured training steps.
    """
    if steps is None:
        steps = max(1, cfg["train"]["steps"] // 6)
    return train(cfg, out_dir, init_checkpoint=source_checkpoint,
                 steps_override=steps, log_fn=log_fn)


# ---- checkpoint-driven evaluation ------------------------------------------------


def sample_patches(models, patchset, indices, sampler_cfg, batch=64, zero_dem=None):
    """Super-resolve the given patch indices; returns depths in cm [n,P,P]."""
    indices = np.asarray(indices)
    outs = []
    for start in range(0, len(indices), batch):
        idx = indices[start : start + batch]
        cond_px = models.conditioning_patches(patchset, idx, zero_dem=zero_dem)
        cfg = SamplerConfig(
            start=sampler_cfg.start,
            m=sampler_cfg.m,
            infer_steps=sampler_cfg.infer_steps,
            seed=sampler_cfg.seed + start,
        )
        if models.mode == "pixel":
            sr = sample(models.unet, cond_px, models.sched, cfg, norm=models.norm)
            outs.append(sr[:, 0])
        else:
            z_cg = models.ae.encode(cond_px[:, :1])
            z_dem = models.ae.encode(cond_px[:, 1:2])
            cond = np.concatenate([z_cg, z_dem], axis=1)
            if cfg.start == "truncated" and cfg.m == 0:
                z_out = z_cg
            else:
                z_out = sample(
                    models.unet, cond, models.sched, cfg,
                    target_channels=models.ae.cfg.latent_channels,
                )
            decoded = models.ae.decode(z_out)[:, 0]
            outs.append(models.norm.denormalize(decoded))
    return np.concatenate(outs, axis=0)


def pick_eval_indices(patchset, sample_n, seed):
    n = len(patchset)
    if sample_n is None or sample_n >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=sample_n, replace=False))


def evaluate_models(models, dataset_dir, split="test", sampler_cfg=None,
                    threshold_cm=30.0, sample_n=None, seed=0, batch=64,
                    zero_dem=None):
    """Sample the split and score SR against the fine maps (CG as baseline)."""
    patchset = PatchSet(dataset_dir, split, config_mod.out_range_for(models.mode))
    if sampler_cfg is None:
        s = models.cfg["sampler"]
        sampler_cfg = SamplerConfig(start=s["start"], m=s["m"],
                                    infer_steps=s["infer_steps"], seed=s["seed"])
    idx = pick_eval_indices(patchset, sample_n, seed)
    sr = sample_patches(models, patchset, idx, sampler_cfg, batch=batch,
                        zero_dem=zero_dem)
    fg = patchset.fine_cm[idx]
    cg = patchset.coarse_cm[idx]
    report = evaluate_arrays(sr, fg, cg, threshold_cm)
    return report, sr, idx
