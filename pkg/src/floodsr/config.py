"""Experiment configuration: JSON documents validated against a schema.

Defaults describe the desk-scale budget: 200 training timesteps with
endpoints scaled to keep the schedule tail near the 1000-step reference,
20,000 optimization steps at batch 16 on 64-pixel patches.
"""

from __future__ import annotations

import copy
import json

import jsonschema

from .diffusion import linear_schedule
from .errors import ContractError
from .latent import AutoencoderConfig
from .unet import UnetConfig

DEFAULTS = {
    "mode": "pixel",
    "dataset": "",
    "seed": 0,
    "schedule": {"T": 200, "alpha_start": 5e-4, "alpha_end": 0.1},
    "unet": {
        "base_width": 32,
        "depth": 4,
        "attn_levels": [2, 3],
        "time_embed_dim": 128,
        "groups": 8,
    },
    "ae": {
        "spatial_factor": 4,
        "latent_channels": 4,
        "base_width": 16,
        "train_steps": 1500,
        "batch_size": 16,
        "lr": 1e-3,
        "recon_tolerance": 0.02,
    },
    "train": {
        "steps": 20000,
        "batch_size": 16,
        "lr": 1e-4,
        "log_every": 100,
        "checkpoint_every": 5000,
    },
    "sampler": {"start": "truncated", "m": 50, "infer_steps": 50, "seed": 0},
    "eval": {"threshold_cm": 30.0, "sample_n": 1000, "seed": 0},
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": ["pixel", "latent"]},
        "dataset": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T": {"type": "integer", "minimum": 1},
                "alpha_start": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "alpha_end": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "unet": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "base_width": {"type": "integer", "minimum": 8},
                "depth": {"type": "integer", "minimum": 2},
                "attn_levels": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "time_embed_dim": {"type": "integer", "minimum": 2},
                "groups": {"type": "integer", "minimum": 1},
            },
        },
        "ae": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "spatial_factor": {"type": "integer", "minimum": 2},
                "latent_channels": {"type": "integer", "minimum": 1},
                "base_width": {"type": "integer", "minimum": 4},
                "train_steps": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "recon_tolerance": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "log_every": {"type": "integer", "minimum": 1},
                "checkpoint_every": {"type": "integer", "minimum": 1},
            },
        },
        "sampler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "start": {"enum": ["random_noise", "truncated"]},
                "m": {"type": "integer", "minimum": 0},
                "infer_steps": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "threshold_cm": {"type": "number", "minimum": 0},
                "sample_n": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
    },
}


def merged_defaults(overrides=None):
    """Deep-merge a partial config document over the defaults."""
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def validate(cfg):
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ContractError(f"invalid config: {exc.message}") from exc
    if cfg["schedule"]["alpha_start"] > cfg["schedule"]["alpha_end"]:
        raise ContractError("invalid config: alpha_start must be <= alpha_end")
    return cfg


def load_config(path):
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ContractError("config document must be a JSON object")
    return validate(merged_defaults(doc))


def default_config():
    return validate(merged_defaults())


def config_json(cfg):
    return json.dumps(cfg, indent=1, sort_keys=True)


# ---- derived objects -----------------------------------------------------------


def schedule_from(cfg):
    s = cfg["schedule"]
    return linear_schedule(s["T"], s["alpha_start"], s["alpha_end"])


def out_range_for(mode):
    # pixel-space maps live in [0, 1]; latents are trained on [-1, 1] maps
    return (0.0, 1.0) if mode == "pixel" else (-1.0, 1.0)


def unet_config_from(cfg):
    u = cfg["unet"]
    mode = cfg["mode"]
    if mode == "pixel":
        in_channels, out_channels = 3, 1
    else:
        latent_channels = cfg["ae"]["latent_channels"]
        in_channels, out_channels = 3 * latent_channels, latent_channels
    return UnetConfig(
        in_channels=in_channels,
        out_channels=out_channels,
        base_width=u["base_width"],
        depth=u["depth"],
        attn_levels=tuple(u["attn_levels"]),
        time_embed_dim=u["time_embed_dim"],
        groups=u["groups"],
    )


def ae_config_from(cfg):
    a = cfg["ae"]
    return AutoencoderConfig(
        spatial_factor=a["spatial_factor"],
        latent_channels=a["latent_channels"],
        base_width=a["base_width"],
    )
