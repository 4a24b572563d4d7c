"""Command-line surface: stage runners, pruning, evaluation, and experiments.

Every command takes ``--config`` (a built-in profile name or a JSON file),
``--seed``, and ``--out``; each writes a machine-readable CSV or checkpoint
plus the fully resolved configuration, so any run is reproducible from its
output directory alone. Exit code 0 on success, 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments
from .data import DegradationSpec, load_sequence, psnr, save_sequence, ssim, synth_sequence
from .graphir import load_checkpoint, save_checkpoint, instantiate
from .pipeline import Model, evaluate_psnr, run_stage, validation_clips
from .profiles import ProfileError, get_profile, profile_network, stage_config
from .regularizer import mark_unimportant
from .rewrite import compile_plan, cost
from .scoring import POLICIES, PruningPlan, plan_for
from .vsrmodel import run_network


def _out_dir(args) -> Path:
    base = args.out or os.environ.get("VSRPRUNE_OUT")
    if base is None:
        raise SystemExit2("--out is required (or set VSRPRUNE_OUT)")
    out = Path(base)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _workers(args) -> int:
    if getattr(args, "workers", None):
        return args.workers
    return int(os.environ.get("VSRPRUNE_WORKERS", "1"))


class SystemExit2(Exception):
    """Config/usage error reported as a one-line cause with exit code 2."""


def _echo_config(out: Path, profile: dict, args) -> None:
    resolved = dict(profile)
    resolved["invocation"] = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True, default=str), encoding="utf-8")


def _load_model(path) -> Model:
    spec, weights, scaling = load_checkpoint(path)
    return Model(spec=spec, weights=weights, scaling=scaling)


def _write_rows(rows: list[dict], path: Path) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    fields = sorted({k for row in rows for k in row})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _seeds(arg: str) -> list[int]:
    try:
        return [int(s) for s in arg.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise SystemExit2(f"bad --seeds value {arg!r}: {exc}") from exc


def _ratios(arg: str) -> list[float]:
    try:
        return [float(s) for s in arg.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise SystemExit2(f"bad --ratios value {arg!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# stage commands


def cmd_pretrain(args) -> int:
    profile = get_profile(args.config)
    out = _out_dir(args)
    _echo_config(out, profile, args)
    spec = profile_network(profile)
    weights = instantiate(spec, args.seed)
    cfg = stage_config(profile, "pretrain", seed=args.seed)
    result = run_stage(cfg, Model(spec, weights), out_dir=out)
    final = [r for r in result.rows if r.get("val_psnr", "") != ""]
    tail = f", val psnr {final[-1]['val_psnr']:.2f} dB" if final else ""
    print(f"pretrained {len(result.rows)} iterations{tail}; checkpoint at {out / 'checkpoint'}")
    return 0


def cmd_sparsify(args) -> int:
    profile = get_profile(args.config)
    out = _out_dir(args)
    _echo_config(out, profile, args)
    model = _load_model(args.checkpoint)
    plan = plan_for(model.spec, model.weights, args.ratio, args.policy, seed=args.seed)
    plan.save(out / "plan.json")
    cfg = stage_config(profile, "sparsify", seed=args.seed)
    result = run_stage(cfg, model, plan=plan, out_dir=out)
    state = result.model.scaling
    print(
        f"sparsified {len(result.rows)} iterations (phase {state.phase}, alpha {state.alpha:g}); "
        f"instrumented checkpoint at {out / 'checkpoint'}"
    )
    return 0


def cmd_prune(args) -> int:
    out = _out_dir(args)
    model = _load_model(args.checkpoint)
    if args.plan:
        plan = PruningPlan.load(args.plan)
    else:
        plan = plan_for(model.spec, model.weights, args.ratio, args.policy, seed=args.seed)
    if model.scaling is not None:
        mark_unimportant(model.scaling, plan)
    result = compile_plan(model.spec, model.weights, model.scaling, plan, resolution=tuple(args.resolution))
    save_checkpoint(out / "checkpoint", result.spec, result.weights)
    plan.save(out / "plan.json")
    (out / "fold_report.txt").write_text(result.fold_report_text(), encoding="utf-8")
    result.cost_before.write_csv(out / "cost_before.csv")
    result.cost_after.write_csv(out / "cost_after.csv")
    _write_rows(_layer_ratio_rows(plan), out / "layer_ratios.csv")
    (out / "config.json").write_text(
        json.dumps({"ratio": plan.ratio, "policy": plan.policy, "seed": plan.seed}, indent=1), encoding="utf-8"
    )
    before, after = result.cost_before, result.cost_after
    print(
        f"pruned: params {before.total_params:,} -> {after.total_params:,}, "
        f"macs {before.total_macs:,} -> {after.total_macs:,}; checkpoint at {out / 'checkpoint'}"
    )
    if args.plot:
        _plot_layer_ratios(plan, out / "layer_ratios.png")
    return 0


def _layer_ratio_rows(plan: PruningPlan) -> list[dict]:
    rows = []
    for site in sorted(plan.site_counts):
        total = plan.site_counts[site]
        pruned = len(plan.pruned.get(site, []))
        rows.append({"site": site, "units": total, "pruned": pruned, "ratio": pruned / total if total else 0.0})
    return rows


def cmd_finetune(args) -> int:
    profile = get_profile(args.config)
    out = _out_dir(args)
    _echo_config(out, profile, args)
    model = _load_model(args.checkpoint)
    plan = PruningPlan.load(args.plan)
    teacher = _load_model(args.teacher) if args.teacher else None
    cfg = stage_config(profile, "finetune", seed=args.seed, loss_tf=not args.no_tf)
    result = run_stage(cfg, model, plan=plan, teacher=teacher, out_dir=out)
    print(f"finetuned {len(result.rows)} iterations; pruned checkpoint at {out / 'checkpoint'}")
    return 0


def cmd_eval(args) -> int:
    profile = get_profile(args.config)
    out = _out_dir(args)
    _echo_config(out, profile, args)
    model = _load_model(args.checkpoint)
    rows = []
    if args.clips:
        clips = [load_sequence(p) for p in args.clips]
        names = args.clips
    else:
        cfg = experiments._eval_setup(profile, args.seed)
        clips = validation_clips(cfg)
        names = [f"synthetic-{cfg.val_seed + i}" for i in range(len(clips))]
    for name, clip in zip(names, clips):
        if clip.hr_frames is None:
            raise SystemExit2(f"clip {name} has no HR frames to evaluate against")
        sr, _ = run_network(model.spec, model.weights, clip, scaling=model.scaling)
        p = float(np.mean([psnr(a, b) for a, b in zip(sr, clip.hr_frames)]))
        s = float(np.mean([ssim(a, b) for a, b in zip(sr, clip.hr_frames)]))
        rows.append({"clip": str(name), "psnr": p, "ssim": s})
    _write_rows(rows, out / "eval.csv")
    mean_p = float(np.mean([r["psnr"] for r in rows]))
    mean_s = float(np.mean([r["ssim"] for r in rows]))
    print(f"eval over {len(rows)} clips: PSNR {mean_p:.2f} dB, SSIM {mean_s:.4f} (RGB, peak 1.0)")
    return 0


def cmd_cost(args) -> int:
    out = _out_dir(args)
    if args.checkpoint:
        model = _load_model(args.checkpoint)
        spec = model.spec
    else:
        profile = get_profile(args.config)
        _echo_config(out, profile, args)
        spec = profile_network(profile)
    report = cost(spec, tuple(args.resolution))
    report.write_csv(out / "cost.csv")
    print(report.summary())
    return 0


def cmd_synth(args) -> int:
    out = _out_dir(args)
    seq = synth_sequence(
        args.seed,
        args.frames,
        (args.size, args.size),
        args.motion_range,
        DegradationSpec(kind=args.degradation),
    )
    save_sequence(seq, out)
    print(f"wrote {args.frames} LR+HR frames with motion sidecar to {out}")
    return 0


# ---------------------------------------------------------------------------
# experiment commands


def cmd_criteria(args) -> int:
    profile = get_profile(args.config)
    out = _out_dir(args)
    _echo_config(out, profile, args)
    rows = experiments.criteria_experiment(
        profile,
        out,
        ratios=_ratios(args.ratios),
        policies=args.policies.split(","),
        seeds=_seeds(args.seeds),
        workers=_workers(args),
    )
    _write_rows(rows, out / "criteria.csv")
    summary = _mean_std(rows, group=("policy", "ratio"))
    _write_rows(summary, out / "criteria_summary.csv")
    for row in summary:
        print(
            f"policy {row['policy']:<12} ratio {row['ratio']:.1f}: "
            f"psnr {row['psnr_mean']:.2f} +- {row['psnr_std']:.2f} dB over {row['n']} seeds"
        )
    if args.plot:
        _plot_criteria(summary, out / "criteria.png")
    return 0


def cmd_sweep(args) -> int:
    profile = get_profile(args.config)
    out = _out_dir(args)
    _echo_config(out, profile, args)
    rows = experiments.sweep_experiment(
        profile,
        out,
        ratios=_ratios(args.ratios),
        seeds=_seeds(args.seeds),
        schemes=tuple(args.schemes.split(",")),
        workers=_workers(args),
    )
    _write_rows(rows, out / "sweep.csv")
    summary = _mean_std(rows, group=("scheme", "ratio"))
    for row in summary:
        macs = [r["macs"] for r in rows if r["scheme"] == row["scheme"] and r["ratio"] == row["ratio"]]
        row["macs_mean"] = float(np.mean(macs))
    _write_rows(summary, out / "sweep_summary.csv")
    for row in summary:
        print(
            f"scheme {row['scheme']:<8} ratio {row['ratio']:.1f}: "
            f"psnr {row['psnr_mean']:.2f} +- {row['psnr_std']:.2f} dB at {row['macs_mean'] / 1e6:.1f}M macs"
        )
    if args.plot:
        _plot_sweep(summary, out / "sweep.png")
    return 0


def cmd_ablate(args) -> int:
    profile = get_profile(args.config)
    out = _out_dir(args)
    _echo_config(out, profile, args)
    rows = experiments.ablate_experiment(
        profile, out, ratio=args.ratio, seeds=_seeds(args.seeds), workers=_workers(args)
    )
    _write_rows(rows, out / "ablate.csv")
    summary = _mean_std(rows, group=("variant",), extra=("hidden_err",))
    _write_rows(summary, out / "ablate_summary.csv")
    for row in summary:
        he = row.get("hidden_err_mean")
        he_s = f", hidden err {he:.4f}" if he is not None else ""
        print(f"variant {row['variant']:<16}: psnr {row['psnr_mean']:.2f} +- {row['psnr_std']:.2f} dB{he_s}")
    return 0


def _mean_std(rows: list[dict], group: tuple, extra: tuple = ()) -> list[dict]:
    keys = sorted({tuple(r[g] for g in group) for r in rows})
    out = []
    for key in keys:
        members = [r for r in rows if tuple(r[g] for g in group) == key]
        row = dict(zip(group, key))
        vals = [m["psnr"] for m in members]
        row["psnr_mean"] = float(np.mean(vals))
        row["psnr_std"] = float(np.std(vals))
        row["n"] = len(members)
        for name in extra:
            has = [m[name] for m in members if m.get(name) is not None]
            row[f"{name}_mean"] = float(np.mean(has)) if has else None
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# optional chart emitters (static images; matplotlib only imported on demand)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _plot_sweep(summary: list[dict], path: Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for scheme in sorted({r["scheme"] for r in summary}):
        pts = sorted((r["macs_mean"], r["psnr_mean"]) for r in summary if r["scheme"] == scheme)
        ax.plot([p[0] / 1e6 for p in pts], [p[1] for p in pts], marker="o", label=scheme)
    ax.set_xlabel("MACs per frame (M)")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def _plot_criteria(summary: list[dict], path: Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    policies = sorted({r["policy"] for r in summary})
    ratios = sorted({r["ratio"] for r in summary})
    width = 0.8 / len(policies)
    for i, policy in enumerate(policies):
        xs = [j + i * width for j in range(len(ratios))]
        ys = [next(r["psnr_mean"] for r in summary if r["policy"] == policy and r["ratio"] == ratio) for ratio in ratios]
        ax.bar(xs, ys, width=width, label=policy)
    ax.set_xticks([j + 0.4 for j in range(len(ratios))])
    ax.set_xticklabels([f"p={r:g}" for r in ratios])
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def _plot_layer_ratios(plan: PruningPlan, path: Path) -> None:
    plt = _pyplot()
    rows = _layer_ratio_rows(plan)
    fig, ax = plt.subplots(figsize=(max(6, len(rows) * 0.25), 4))
    ax.bar(range(len(rows)), [r["ratio"] for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r["site"] for r in rows], rotation=90, fontsize=5)
    ax.set_ylabel("pruning ratio")
    fig.tight_layout()
    fig.savefig(path, dpi=120)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vsrprune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", default="toy", help="profile name (toy, toy-uni, paper-scale) or JSON path")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory (or env VSRPRUNE_OUT)")

    p = sub.add_parser("pretrain", help="train a fresh network with the reconstruction loss")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("sparsify", help="select unimportant units and ramp the sparsity penalty")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--policy", choices=POLICIES, default="min-global")
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("prune", help="physically rewrite a checkpoint to its kept units")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--policy", choices=POLICIES, default="min-global")
    p.add_argument("--plan", default=None, help="use an existing plan.json instead of selecting")
    p.add_argument("--resolution", type=int, nargs=2, default=[180, 320], metavar=("H", "W"))
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("finetune", help="compile the pruned network and finetune it")
    common(p)
    p.add_argument("--checkpoint", required=True, help="instrumented checkpoint from sparsify")
    p.add_argument("--plan", required=True)
    p.add_argument("--teacher", default=None, help="checkpoint for hidden-state alignment")
    p.add_argument("--no-tf", action="store_true", help="disable the hidden-state alignment loss")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on clips")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clips", nargs="*", default=None, help="sequence directories (default: synthetic val set)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="parameter/MAC report for a profile or checkpoint")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--resolution", type=int, nargs=2, default=[180, 320], metavar=("H", "W"))
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("synth", help="generate a synthetic sequence directory")
    common(p, config=False)
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--size", type=int, default=128, help="HR frame size")
    p.add_argument("--motion-range", type=int, default=2)
    p.add_argument("--degradation", choices=["BI", "BD"], default="BD")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("criteria", help="compare selection policies across ratios")
    common(p)
    p.add_argument("--ratios", default="0.3,0.5,0.7")
    p.add_argument("--policies", default="min-global,min-local,max-global,max-local,rand-global")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_criteria)

    p = sub.add_parser("sweep", help="PSNR-vs-cost curves per scheme at matched MAC targets")
    common(p)
    p.add_argument("--ratios", default="0.3,0.5,0.7")
    p.add_argument("--schemes", default="ssl,l1norm,lite")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="component ablation at one pruning ratio")
    common(p)
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SystemExit2, ProfileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
