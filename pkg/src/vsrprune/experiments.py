"""Desk-scale experiment cells: criteria comparison, sweep, and ablation.

Every experiment decomposes into independent (scheme, policy, ratio, seed)
cells sharing one pretrained checkpoint per seed. Cells cache their results
as JSON under the output directory, are internally deterministic, and can
run in a process pool; result assembly is keyed, so completion order does
not matter.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    @contextmanager
    def threadpool_limits(limits=None):
        yield

from .graphir import load_checkpoint, save_checkpoint
from .pipeline import (
    Model,
    StageConfig,
    baseline_l1norm_plan,
    baseline_lite_spec,
    evaluate_psnr,
    run_stage,
    validation_clips,
)
from .profiles import profile_network, stage_config
from .rewrite import compile_plan, cost
from .scoring import (
    OUTPUT_FILTER,
    SHUFFLE_GROUP,
    PruningPlan,
    plan_for,
    score_units,
    select,
)
from .graphir import instantiate
from .vsrmodel import hidden_error_profile


def _fresh(model: Model) -> Model:
    """Deep-copy weights so a training cell cannot mutate a shared checkpoint."""
    return Model(
        spec=model.spec,
        weights={k: v.copy() for k, v in model.weights.items()},
        scaling=None,
    )


def profile_fingerprint(profile: dict) -> str:
    """Short content hash so cached cells invalidate when the profile changes."""
    import hashlib

    from .profiles import profile_json

    return hashlib.sha1(profile_json(profile).encode()).hexdigest()[:10]


def pretrained_model(profile: dict, seed: int, out_dir: Path) -> Model:
    """Train (or load the cached) pretrain-stage checkpoint for this seed.

    A file lock serialises concurrent workers that need the same seed, so
    only one trains while the others wait and load the finished checkpoint.
    """
    from filelock import FileLock

    stage_dir = Path(out_dir) / f"pretrain-{profile_fingerprint(profile)}" / f"s{seed}"
    ckpt_dir = stage_dir / "checkpoint"
    stage_dir.mkdir(parents=True, exist_ok=True)
    with FileLock(str(stage_dir) + ".lock"):
        if not ckpt_dir.exists():
            spec = profile_network(profile)
            weights = instantiate(spec, seed)
            cfg = stage_config(profile, "pretrain", seed=seed)
            with threadpool_limits(limits=1):  # tiny matrices; BLAS threading only adds overhead
                run_stage(cfg, Model(spec, weights), out_dir=stage_dir)
    spec, weights, scaling = load_checkpoint(ckpt_dir)
    return Model(spec=spec, weights=weights, scaling=scaling)


def _eval_setup(profile: dict, seed: int) -> StageConfig:
    overrides = dict(profile.get("eval", {}))
    return stage_config(profile, "pretrain", seed=seed, iterations=1, **overrides)


def _halved_upsampler_plan(spec, weights, ratio: float, block_plan: PruningPlan) -> PruningPlan:
    """Fixed (not learned) halving of the upsampling head's groups and filters."""
    pruned = dict(block_plan.pruned)
    kept = dict(block_plan.kept)
    counts = dict(block_plan.site_counts)
    for unit_kind, site_suffix in ((SHUFFLE_GROUP, "group"), (OUTPUT_FILTER, "out")):
        for layer, subnet in spec.conv_layers():
            if subnet != "upsampler":
                continue
            if site_suffix == "group" and layer.prune_groups:
                n = layer.out_channels // 4
            elif site_suffix == "out" and layer.prune_out:
                n = layer.out_channels
            else:
                continue
            site = f"{layer.id}:{site_suffix}"
            half = max(1, n - int(n * ratio))
            kept[site] = list(range(half))
            pruned[site] = list(range(half, n))
            counts[site] = n
    return PruningPlan(
        ratio=block_plan.ratio,
        policy=block_plan.policy,
        seed=block_plan.seed,
        pruned=pruned,
        kept=kept,
        site_counts=counts,
    )


def _block_only_plan(spec, weights, ratio: float, policy: str, seed: int | None) -> PruningPlan:
    """Plan over residual-block and entry units only (upsampler untouched)."""
    block_layers = set()
    for cell in spec.cells():
        block_layers.add(cell.entry.id)
        for blk in cell.blocks:
            block_layers.add(blk.conv1.id)
            block_layers.add(blk.conv2.id)
    scores = [s for s in score_units(spec, weights) if s.unit.layer_id in block_layers]
    return select(scores, ratio, policy, seed=seed)


def run_cell(
    profile: dict,
    out_dir,
    seed: int,
    scheme: str = "ssl",
    policy: str = "min-global",
    ratio: float = 0.5,
    tf: bool = True,
    shuffle: str = "grouped",  # grouped | halved
    target_macs: int | None = None,
    width_factor: float | None = None,
) -> dict:
    """Run one experiment cell and return its keyed result row (cached)."""
    out_dir = Path(out_dir)
    key = _cell_key(scheme, policy, ratio, tf, shuffle, target_macs, width_factor, seed)
    cache = out_dir / f"cells-{profile_fingerprint(profile)}" / key / "result.json"
    if cache.exists():
        return json.loads(cache.read_text(encoding="utf-8"))
    with threadpool_limits(limits=1):
        return _run_cell_inner(
            profile, out_dir, cache, seed, scheme, policy, ratio, tf, shuffle, target_macs, width_factor
        )


def _run_cell_inner(
    profile, out_dir, cache, seed, scheme, policy, ratio, tf, shuffle, target_macs, width_factor
) -> dict:
    teacher = pretrained_model(profile, seed, out_dir)
    eval_cfg = _eval_setup(profile, seed)
    clips = validation_clips(eval_cfg)
    resolution = (eval_cfg.patch, eval_cfg.patch)
    cell_dir = cache.parent
    cell_dir.mkdir(parents=True, exist_ok=True)

    sparsify_cfg = stage_config(profile, "sparsify", seed=seed + 1)
    finetune_cfg = stage_config(profile, "finetune", seed=seed + 2, loss_tf=tf)
    total_budget = sparsify_cfg.budget() + finetune_cfg.budget()

    per_weight = bool(profile.get("scoring", {}).get("per_weight", False))
    if scheme == "ssl":
        model = _fresh(teacher)
        if shuffle == "halved":
            block_plan = _block_only_plan(model.spec, model.weights, ratio, policy, seed)
            plan = _halved_upsampler_plan(model.spec, model.weights, ratio, block_plan)
        else:
            plan = plan_for(model.spec, model.weights, ratio, policy, seed=seed, per_weight=per_weight)
        sparsified = run_stage(sparsify_cfg, model, plan=plan)
        final = run_stage(finetune_cfg, sparsified.model, plan=plan, teacher=teacher, out_dir=cell_dir / "finetune")
    elif scheme == "l1norm":
        model = _fresh(teacher)
        if target_macs is not None:
            ratio = match_baseline_ratio(model.spec, model.weights, target_macs, resolution)
        plan = baseline_l1norm_plan(model.spec, model.weights, ratio)
        # no sparsity stage: direct removal gets the same total training budget
        cfg = StageConfig(**{**_cfg_dict(finetune_cfg), "iterations": total_budget, "loss_tf": tf})
        final = run_stage(cfg, model, plan=plan, teacher=teacher, out_dir=cell_dir / "finetune")
    elif scheme == "lite":
        if width_factor is None:
            if target_macs is None:
                raise ValueError("lite cells need width_factor or target_macs")
            width_factor = match_lite_factor(teacher.spec, target_macs, resolution)
        spec = baseline_lite_spec(teacher.spec, width_factor)
        weights = instantiate(spec, seed + 3)
        pretrain_cfg = stage_config(profile, "pretrain", seed=seed)
        cfg = StageConfig(**{**_cfg_dict(pretrain_cfg), "iterations": pretrain_cfg.budget() + total_budget})
        final = run_stage(cfg, Model(spec, weights), out_dir=cell_dir / "train")
        plan = None
    else:
        raise ValueError(f"unknown scheme {scheme!r}")

    report = cost(final.model.spec, resolution)
    row = {
        "key": cache.parent.name,
        "scheme": scheme,
        "policy": policy,
        "ratio": float(ratio),
        "tf": bool(tf),
        "shuffle": shuffle,
        "width_factor": width_factor,
        "seed": seed,
        "psnr": evaluate_psnr(final.model, clips),
        "params": report.total_params,
        "macs": report.total_macs,
        "hidden_err": _final_hidden_error(teacher, final.model, clips) if scheme != "lite" else None,
    }
    cache.write_text(json.dumps(row, indent=1), encoding="utf-8")
    return row


def _cfg_dict(cfg: StageConfig) -> dict:
    from dataclasses import asdict

    return asdict(cfg)


def _cell_key(scheme, policy, ratio, tf, shuffle, target_macs, width_factor, seed) -> str:
    parts = [scheme, policy, f"r{ratio:g}", f"tf{int(tf)}", shuffle]
    if target_macs is not None:
        parts.append(f"m{target_macs}")
    if width_factor is not None:
        parts.append(f"w{width_factor:g}")
    parts.append(f"s{seed}")
    return "-".join(parts)


def _final_hidden_error(teacher: Model, pruned: Model, clips) -> float:
    """Mean final-state error against the teacher over the validation clips."""
    vals = []
    for clip in clips:
        errs = hidden_error_profile(
            (teacher.spec, teacher.weights, None), (pruned.spec, pruned.weights, None), clip
        )
        final = [errs["forward"][-1]]
        if "backward" in errs:
            final.append(errs["backward"][-1])
        vals.append(float(np.mean(final)))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# cost matching


def match_baseline_ratio(spec, weights, target_macs: int, resolution) -> float:
    """Block-only-pruning ratio whose compiled MACs are closest to the target."""
    width = spec.forward_cell.trunk_width
    best_ratio, best_err = 0.0, float("inf")
    for k in range(width):
        ratio = k / width
        plan = baseline_l1norm_plan(spec, weights, ratio)
        macs = compile_plan(spec, weights, None, plan, resolution=resolution).cost_after.total_macs
        err = abs(macs - target_macs)
        if err < best_err:
            best_ratio, best_err = ratio, err
    return best_ratio


def match_lite_factor(spec, target_macs: int, resolution) -> float:
    """Width factor whose scratch network MACs are closest to the target."""
    width = spec.forward_cell.trunk_width
    best_f, best_err = 1.0, float("inf")
    for w in range(1, width + 1):
        factor = w / width
        macs = cost(baseline_lite_spec(spec, factor), resolution).total_macs
        err = abs(macs - target_macs)
        if err < best_err:
            best_f, best_err = factor, err
    return best_f


# ---------------------------------------------------------------------------
# experiment drivers


def _run_cells(profile: dict, out_dir, cells: list[dict], workers: int = 1) -> list[dict]:
    if workers <= 1:
        return [run_cell(profile, out_dir, **cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_cell, profile, out_dir, **cell) for cell in cells]
        return [f.result() for f in futures]


def criteria_experiment(
    profile: dict,
    out_dir,
    ratios=(0.3, 0.5, 0.7),
    policies=("min-global", "min-local", "max-global", "max-local", "rand-global"),
    seeds=(0, 1, 2, 3, 4),
    workers: int = 1,
) -> list[dict]:
    """PSNR per (policy, ratio, seed) for the criterion-comparison study."""
    cells = [
        {"seed": s, "scheme": "ssl", "policy": p, "ratio": r}
        for r in ratios
        for p in policies
        for s in seeds
    ]
    return _run_cells(profile, out_dir, cells, workers)


def sweep_experiment(
    profile: dict,
    out_dir,
    ratios=(0.3, 0.5, 0.7),
    seeds=(0, 1, 2, 3, 4),
    schemes=("ssl", "l1norm", "lite"),
    workers: int = 1,
) -> list[dict]:
    """PSNR-vs-cost rows per scheme at matched MAC targets."""
    rows = _run_cells(
        profile,
        out_dir,
        [{"seed": s, "scheme": "ssl", "policy": "min-global", "ratio": r} for r in ratios for s in seeds],
        workers,
    )
    targets = {
        r: int(np.mean([row["macs"] for row in rows if row["ratio"] == r and row["scheme"] == "ssl"]))
        for r in ratios
    }
    extra = []
    for scheme in schemes:
        if scheme == "ssl":
            continue
        for r in ratios:
            for s in seeds:
                extra.append({"seed": s, "scheme": scheme, "ratio": r, "tf": False, "target_macs": targets[r]})
    rows += _run_cells(profile, out_dir, extra, workers)
    return rows


ABLATE_VARIANTS = {
    # skip-last-conv block pruning at matched MACs, alignment loss on
    "baseline_blocks": {"scheme": "l1norm", "tf": True},
    # gather/scatter block rewrite, but the upsampler halved by fiat
    "halved_head": {"scheme": "ssl", "shuffle": "halved", "tf": False},
    # full rewrite with learned shuffle groups, alignment loss off
    "no_align": {"scheme": "ssl", "shuffle": "grouped", "tf": False},
    "full": {"scheme": "ssl", "shuffle": "grouped", "tf": True},
}


def ablate_experiment(
    profile: dict,
    out_dir,
    ratio: float = 0.5,
    seeds=(0, 1, 2, 3, 4),
    workers: int = 1,
) -> list[dict]:
    """Component ablation at one ratio: block scheme, shuffle grouping, alignment loss."""
    full_rows = _run_cells(
        profile,
        out_dir,
        [{"seed": s, "scheme": "ssl", "ratio": ratio, "tf": True} for s in seeds],
        workers,
    )
    target = int(np.mean([r["macs"] for r in full_rows]))
    cells = []
    labels = []
    for name, opts in ABLATE_VARIANTS.items():
        if name == "full":
            continue
        for s in seeds:
            cell = {"seed": s, "ratio": ratio, **opts}
            if opts["scheme"] == "l1norm":
                cell["target_macs"] = target
            cells.append(cell)
            labels.append(name)
    rows = _run_cells(profile, out_dir, cells, workers)
    for row, label in zip(rows, labels):
        row["variant"] = label
    for row in full_rows:
        row["variant"] = "full"
    return full_rows + rows


def error_accumulation_run(profile: dict, out_dir, seed: int, frames: int = 10, ratio: float = 0.5) -> list[float]:
    """Forward hidden-state error per timestep for a pruned-but-unfinetuned model."""
    from .data import synth_sequence

    teacher = pretrained_model(profile, seed, Path(out_dir))
    plan = plan_for(teacher.spec, teacher.weights, ratio, "min-global")
    pruned = compile_plan(teacher.spec, teacher.weights, None, plan)
    cfg = _eval_setup(profile, seed)
    seq = synth_sequence(cfg.val_seed + 50 + seed, frames, (4 * cfg.patch, 4 * cfg.patch), cfg.motion_range)
    errs = hidden_error_profile(
        (teacher.spec, teacher.weights, None), (pruned.spec, pruned.weights, None), seq
    )
    return errs["forward"]
