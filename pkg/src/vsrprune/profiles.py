"""Named configuration profiles plus JSON config-file loading.

A profile bundles the network constructor arguments, the data settings,
and per-stage budgets. The built-in ``toy``/``toy-uni`` profiles run the
reference desk-scale network (trunk 16, 3 blocks per direction); the
``paper-scale`` profile carries the full-scale network and published
schedule constants, and is meant for cost reporting rather than CPU
training.
"""

from __future__ import annotations

import json
from copy import deepcopy
from pathlib import Path

from .graphir import NetworkSpec, make_network
from .pipeline import StageConfig

_TOY = {
    "name": "toy",
    "network": {"trunk_width": 16, "blocks_per_cell": 3, "bidirectional": True},
    "data": {"frames": 4, "patch": 16, "motion_range": 1, "degradation": "BD", "detail_sigma": 2.0, "shapes": 8},
    "pretrain": {"iterations": 2500, "base_lr": 1e-3, "val_interval": 0},
    "sparsify": {"delta": 2e-3, "tau": 0.1, "t1": 2, "t2": 40, "gamma_decay": 0.05, "base_lr": 1e-3, "val_interval": 0},
    "finetune": {"iterations": 120, "base_lr": 1e-3, "val_interval": 0},
    "eval": {"val_clips": 4, "frames": 6, "patch": 20},
}

_TOY_UNI = deepcopy(_TOY)
_TOY_UNI["name"] = "toy-uni"
_TOY_UNI["network"]["bidirectional"] = False

# Reference full-scale configuration: published schedule constants; valid to
# instantiate and cost, far too large to train on CPU.
_PAPER_SCALE = {
    "name": "paper-scale",
    "network": {"trunk_width": 64, "blocks_per_cell": 30, "bidirectional": True},
    "data": {"frames": 15, "patch": 64, "motion_range": 2, "degradation": "BI"},
    "pretrain": {"iterations": 300_000, "base_lr": 2e-4, "val_interval": 5000},
    "sparsify": {"delta": 1e-4, "tau": 0.1, "t1": 5, "t2": 3375, "gamma_decay": 2e-4, "val_interval": 5000},
    "finetune": {"iterations": 300_000, "base_lr": 2e-4, "val_interval": 5000},
    "eval": {"val_clips": 4},
}

_BUILTIN = {p["name"]: p for p in (_TOY, _TOY_UNI, _PAPER_SCALE)}


class ProfileError(ValueError):
    """Unknown profile name or malformed config file."""


def get_profile(name_or_path: str) -> dict:
    """Resolve a built-in profile name or load a JSON config file."""
    if name_or_path in _BUILTIN:
        return deepcopy(_BUILTIN[name_or_path])
    path = Path(name_or_path)
    if path.exists():
        try:
            profile = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ProfileError(f"config file {path} is not valid JSON: {exc}") from exc
        base_name = profile.get("base")
        if base_name:
            base = get_profile(base_name)
            profile = _merge(base, profile)
        for key in ("network", "data"):
            if key not in profile:
                raise ProfileError(f"config file {path} is missing the {key!r} section")
        return profile
    raise ProfileError(
        f"unknown profile {name_or_path!r}; built-ins: {sorted(_BUILTIN)} (or pass a JSON file path)"
    )


def _merge(base: dict, override: dict) -> dict:
    out = deepcopy(base)
    for k, v in override.items():
        if k == "base":
            continue
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


def profile_network(profile: dict) -> NetworkSpec:
    return make_network(**profile["network"])


def stage_config(profile: dict, stage: str, seed: int, **overrides) -> StageConfig:
    """Build a StageConfig from a profile's data section plus stage overrides."""
    if stage not in ("pretrain", "sparsify", "finetune"):
        raise ProfileError(f"unknown stage {stage!r}")
    kwargs: dict = {"stage": stage, "seed": seed}
    kwargs.update(profile["data"])
    kwargs.update(profile.get(stage, {}))
    kwargs.update(overrides)
    return StageConfig(**kwargs)


def profile_json(profile: dict) -> str:
    return json.dumps(profile, indent=1, sort_keys=True)
