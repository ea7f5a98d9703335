"""Pipeline configuration: TOML on disk, JSON Schema for validation.

Every table is closed (unknown keys are errors). Missing keys take the
defaults below. Path entries are resolved against the ``--out`` directory
when relative.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Optional

import jsonschema
import tomli

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "paths": {"raw": "raw", "processed": "processed", "datasets": "datasets", "checkpoints": "checkpoints"},
    "capture": {
        "camera": {"fx": 600.0, "fy": 600.0, "cx": 320.0, "cy": 240.0, "width": 640, "height": 480},
        "cube_edge": 0.05,
        "marker_size": 0.04,
        "hand_model": "",
    },
    "synth": {
        "n_human": 40,
        "n_robot": 10,
        "noise_px": 0.5,
        "dropout": 0.0,
        "defects": [],
    },
    "env": {
        "n_steps": 120,
        "rate": 30.0,
        "gain": 0.08,
        "max_speed": 0.05,
        "scale": 0.1,
        "depth": 0.5,
        "embedding_dim": 32,
        "embed_seed": 1234,
        "embed_scale_min": 1.5,
        "embed_scale_max": 15.0,
        "human_offset": 0.5,
        "success_radius": 0.05,
    },
    "process": {
        "min_track_ratio": 0.75,
        "min_frames": 30,
        "jump_max": 0.10,
        "max_gap": 5,
        "clip_lo_pct": 2.0,
        "clip_hi_pct": 97.0,
        "smooth_sigma": 2.0,
        "reject_rms": 3.0,
        "ik_damping": 0.05,
        "ik_max_iters": 200,
        "ik_tol": 1e-4,
    },
    "dataset": {"chunk_size": 48, "horizon": 3, "step": 1, "norm_lo_pct": 2.0, "norm_hi_pct": 97.0},
    "sampler": {"w_r": 1, "w_h": 2, "batch_size": 256},
    "train": {
        "steps": 5000,
        "base_lr": 3e-4,
        "warmup_steps": 2000,
        "weight_decay": 1e-6,
        "betas": [0.95, 0.999],
        "width": 256,
        "temb_dim": 32,
        "skip": True,
        "diffusion_steps": 100,
        "schedule": "cosine",
        "eval_diffusion_steps": 16,
        "checkpoint_every": 1000,
        "eval_batch": 512,
    },
    "eval": {"episodes": 50, "exec_horizon": 12, "policy": "checkpoint"},
}


def _num(minimum=None, exclusive=False, integer=False, maximum=None):
    s = {"type": "integer" if integer else "number"}
    if minimum is not None:
        s["exclusiveMinimum" if exclusive else "minimum"] = minimum
    if maximum is not None:
        s["maximum"] = maximum
    return s


def _table(props):
    return {"type": "object", "additionalProperties": False, "properties": props}


SCHEMA = _table({
    "seed": _num(0, integer=True),
    "paths": _table({k: {"type": "string", "minLength": 1} for k in DEFAULTS["paths"]}),
    "capture": _table({
        "camera": _table({
            "fx": _num(0, True), "fy": _num(0, True), "cx": _num(), "cy": _num(),
            "width": _num(1, integer=True), "height": _num(1, integer=True),
        }),
        "cube_edge": _num(0, True),
        "marker_size": _num(0, True),
        "hand_model": {"type": "string"},
    }),
    "synth": _table({
        "n_human": _num(0, integer=True),
        "n_robot": _num(0, integer=True),
        "noise_px": _num(0),
        "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "defects": {"type": "array", "items": _table({
            "embodiment": {"enum": ["human", "robot"]},
            "index": _num(0, integer=True),
            "kind": {"enum": ["occlusion", "jump", "short"]},
        })},
    }),
    "env": _table({
        "n_steps": _num(2, integer=True),
        "rate": _num(0, True),
        "gain": _num(0, True, maximum=1),
        "max_speed": _num(0, True),
        "scale": _num(0, True),
        "depth": _num(0, True),
        "embedding_dim": _num(1, integer=True),
        "embed_seed": _num(0, integer=True),
        "embed_scale_min": _num(0, True),
        "embed_scale_max": _num(0, True),
        "human_offset": _num(0),
        "success_radius": _num(0, True),
    }),
    "process": _table({
        "min_track_ratio": _num(0, maximum=1),
        "min_frames": _num(1, integer=True),
        "jump_max": _num(0, True),
        "max_gap": _num(0, integer=True),
        "clip_lo_pct": _num(0, maximum=100),
        "clip_hi_pct": _num(0, maximum=100),
        "smooth_sigma": _num(0, True),
        "reject_rms": _num(0, True),
        "ik_damping": _num(0, True),
        "ik_max_iters": _num(1, integer=True),
        "ik_tol": _num(0, True),
    }),
    "dataset": _table({
        "chunk_size": _num(1, integer=True),
        "horizon": _num(0, integer=True),
        "step": _num(1, integer=True),
        "norm_lo_pct": _num(0, maximum=100),
        "norm_hi_pct": _num(0, maximum=100),
    }),
    "sampler": _table({"w_r": _num(0, integer=True), "w_h": _num(0, integer=True), "batch_size": _num(1, integer=True)}),
    "train": _table({
        "steps": _num(0, integer=True),
        "base_lr": _num(0),
        "warmup_steps": _num(0, integer=True),
        "weight_decay": _num(0),
        "betas": {"type": "array", "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                  "minItems": 2, "maxItems": 2},
        "width": _num(1, integer=True),
        "temb_dim": _num(2, integer=True),
        "skip": {"type": "boolean"},
        "diffusion_steps": _num(2, integer=True),
        "schedule": {"enum": ["cosine", "linear"]},
        "eval_diffusion_steps": _num(1, integer=True),
        "checkpoint_every": _num(1, integer=True),
        "eval_batch": _num(1, integer=True),
    }),
    "eval": _table({
        "episodes": _num(1, integer=True),
        "exec_horizon": _num(1, integer=True),
        "policy": {"enum": ["checkpoint", "oracle"]},
    }),
})


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    d, s, p = cfg["dataset"], cfg["sampler"], cfg["process"]
    if d["horizon"] % d["step"]:
        raise ConfigError("dataset.horizon must be a multiple of dataset.step")
    if s["w_r"] + s["w_h"] == 0:
        raise ConfigError("sampler weights must not both be zero")
    if p["clip_lo_pct"] >= p["clip_hi_pct"] or d["norm_lo_pct"] >= d["norm_hi_pct"]:
        raise ConfigError("percentile bounds must satisfy lo < hi")
    if cfg["env"]["embed_scale_min"] > cfg["env"]["embed_scale_max"]:
        raise ConfigError("env.embed_scale_min exceeds env.embed_scale_max")
    if cfg["train"]["eval_diffusion_steps"] > cfg["train"]["diffusion_steps"]:
        raise ConfigError("train.eval_diffusion_steps exceeds train.diffusion_steps")
    return cfg


def load_config(path: Optional[Path] = None, overrides: Optional[dict] = None) -> dict:
    """Defaults <- TOML file <- ``overrides``, then validated."""
    user = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                user = tomli.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return validate(_merge(_merge(DEFAULTS, user), overrides or {}))
