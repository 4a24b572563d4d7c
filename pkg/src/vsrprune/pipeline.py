"""Three-stage training: pretrain, sparsify, prune+finetune, plus baselines.

Each stage is a seeded, deterministic loop over synthetic sequences: the
pretrain stage minimizes the reconstruction loss, the sparsify stage adds
the scaling-factor penalty (applied as a decoupled decay step) while the
penalty weight ramps on its schedule, and the finetune stage compiles the
pruned network once and then trains it with the reconstruction loss plus
the hidden-state alignment loss against a frozen teacher.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .data import DegradationSpec, psnr, synth_sequence
from .graphir import NetworkSpec, make_network, save_checkpoint
from .regularizer import (
    PHASE_DONE,
    ScalingState,
    TrajectoryLog,
    decay_unimportant,
    inject_scaling,
    mark_unimportant,
    sparsity_penalty,
    step_schedule,
)
from .rewrite import RewriteResult, compile_plan
from .scoring import PruningPlan, plan_for
from .tensorcore import Scalar, Tape
from .vsrmodel import HiddenTrace, Sequence, run_network, run_trace, stack_frames

METRIC_FIELDS = ["iter", "loss_rec", "loss_sir", "loss_tf", "alpha", "val_psnr"]
VAL_SEED_OFFSET = 900_000


@dataclass
class Model:
    """A network, its weights, and (while instrumented) its scaling state."""

    spec: NetworkSpec
    weights: dict
    scaling: ScalingState | None = None

    def parameter_arrays(self) -> list[np.ndarray]:
        params: list[np.ndarray] = []
        for layer_id in sorted(self.weights):
            kt = self.weights[layer_id]
            params.append(kt.data)
            if kt.bias is not None:
                params.append(kt.bias)
        return params

    def gamma_arrays(self) -> list[np.ndarray]:
        if self.scaling is None:
            return []
        return [self.scaling.factors[s] for s in self.scaling.sites()]

    def checksum(self) -> int:
        import zlib

        crc = 0
        for layer_id in sorted(self.weights):
            kt = self.weights[layer_id]
            crc = zlib.crc32(kt.data.tobytes(), crc)
            if kt.bias is not None:
                crc = zlib.crc32(kt.bias.tobytes(), crc)
        return crc


class CosineSchedule:
    """Cosine annealing from base to floor over a fixed horizon."""

    def __init__(self, base: float, floor: float, horizon: int) -> None:
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.base = base
        self.floor = floor
        self.horizon = horizon

    def lr(self, iteration: int) -> float:
        t = min(iteration, self.horizon)
        return self.floor + 0.5 * (self.base - self.floor) * (1.0 + math.cos(math.pi * t / self.horizon))

    def factor(self, iteration: int) -> float:
        return self.lr(iteration) / self.base


class Adam:
    """Adam with parameter groups; state keyed by parameter identity."""

    def __init__(self, groups: list[tuple[list[np.ndarray], float]], beta1=0.9, beta2=0.999, eps=1e-8) -> None:
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self, tape: Tape, lr_factor: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for params, lr in self.groups:
            step_size = lr * lr_factor
            for p in params:
                g = tape.grad(p)
                if g is None:
                    continue
                g = np.asarray(g, dtype=np.float64)
                m = self._m.get(id(p))
                if m is None:
                    m = self._m[id(p)] = np.zeros(p.shape, dtype=np.float64)
                    self._v[id(p)] = np.zeros(p.shape, dtype=np.float64)
                v = self._v[id(p)]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                update = step_size * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                p -= update.astype(p.dtype)


@dataclass
class StageConfig:
    """One stage's budgets, optimizer settings, data settings, and loss switches."""

    stage: str  # pretrain | sparsify | finetune
    iterations: int | None = None  # sparsify derives its budget from the schedule
    seed: int = 0
    base_lr: float = 2e-4
    lr_floor: float = 1e-7
    cosine_horizon: int | None = None
    gamma_lr: float = 2e-4
    gamma_decay: float = 0.05
    frames: int = 4
    patch: int = 16  # LR pixels
    motion_range: int = 1
    degradation: str = "BD"
    detail_sigma: float = 2.0  # texture scale of synthetic content
    shapes: int = 8
    loss_rec: bool = True
    loss_sir: bool = False
    loss_tf: bool = False
    tf_norm: str = "mae"  # mae | mse
    eps: float = 1e-6
    delta: float = 1e-3
    tau: float = 0.1
    t1: int = 5
    t2: int = 100
    val_interval: int = 250
    val_clips: int = 3
    val_seed: int = VAL_SEED_OFFSET

    def __post_init__(self) -> None:
        if self.stage not in ("pretrain", "sparsify", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == "sparsify":
            self.loss_sir = True
        if self.tf_norm not in ("mae", "mse"):
            raise ValueError(f"tf_norm must be mae or mse, got {self.tf_norm!r}")

    def schedule_iterations(self) -> int:
        ramp = self.t1 * math.ceil(self.tau / self.delta)
        return ramp + self.t2

    def budget(self) -> int:
        if self.stage == "sparsify":
            derived = self.schedule_iterations()
            return derived if self.iterations is None else min(self.iterations, derived)
        if self.iterations is None:
            raise ValueError(f"{self.stage} stage needs an explicit iteration budget")
        return self.iterations

    def degradation_spec(self) -> DegradationSpec:
        return DegradationSpec(kind=self.degradation)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        return cls(**d)


def sample_sequence(config: StageConfig, seed: int) -> Sequence:
    hr = 4 * config.patch
    return synth_sequence(
        seed,
        config.frames,
        (hr, hr),
        config.motion_range,
        config.degradation_spec(),
        detail_sigma=config.detail_sigma,
        shapes=config.shapes,
    )


def validation_clips(config: StageConfig) -> list[Sequence]:
    return [sample_sequence(config, config.val_seed + i) for i in range(config.val_clips)]


def evaluate_psnr(model: Model, clips: list[Sequence]) -> float:
    """Mean PSNR of SR output against HR targets over held-out clips."""
    vals = []
    for clip in clips:
        sr, _ = run_network(model.spec, model.weights, clip, scaling=model.scaling)
        for out, hr in zip(sr, clip.hr_frames):
            vals.append(psnr(out, hr))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# losses


def temporal_alignment_loss(pruned: HiddenTrace, teacher: HiddenTrace, norm: str = "mae") -> Scalar:
    """Distance between final hidden states of the pruned model and the teacher.

    Sums the forward term and, for bidirectional models, the backward term.
    The teacher trace must come from a no-tape evaluation so gradients flow
    only into the pruned model.
    """
    fn = tc.mae if norm == "mae" else tc.mse
    loss = fn(pruned.final_forward, teacher.final_forward)
    if pruned.backward is not None:
        if teacher.backward is None:
            raise ValueError("teacher trace has no backward states")
        loss = loss + fn(pruned.final_backward, teacher.final_backward)
    return loss


def reconstruction_loss(sr_frames, hr_frames, eps: float) -> Scalar:
    return tc.charbonnier(stack_frames(sr_frames), stack_frames(hr_frames), eps=eps)


# ---------------------------------------------------------------------------
# stage runner


@dataclass
class StageResult:
    model: Model
    rows: list[dict]
    plan: PruningPlan | None = None
    rewrite: RewriteResult | None = None


def _write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in METRIC_FIELDS})


def run_stage(
    config: StageConfig,
    model: Model,
    plan: PruningPlan | None = None,
    teacher: Model | None = None,
    out_dir=None,
) -> StageResult:
    """Run one training stage; deterministic given config and seed.

    pretrain: minimizes the reconstruction loss on the instrumented-or-plain
    model. sparsify: requires a plan and scaling state; advances the penalty
    schedule every iteration and stops when the schedule is done (or at the
    explicit budget). finetune: requires a plan; compiles the pruned network
    once up front, then minimizes reconstruction plus (optionally) the
    hidden-state alignment loss against the frozen teacher.
    """
    rewrite_result = None
    if config.stage == "sparsify":
        if plan is None:
            raise ValueError("sparsify needs a pruning plan")
        if model.scaling is None:
            model = replace_scaling(model, config)
        mark_unimportant(model.scaling, plan)
    elif config.stage == "finetune":
        if plan is None:
            raise ValueError("finetune needs the pruning plan to compile")
        if config.loss_tf and teacher is None:
            raise ValueError("hidden-state alignment needs a frozen teacher checkpoint")
        rewrite_result = compile_plan(model.spec, model.weights, model.scaling, plan)
        model = Model(spec=rewrite_result.spec, weights=rewrite_result.weights, scaling=None)

    groups: list[tuple[list[np.ndarray], float]] = [(model.parameter_arrays(), config.base_lr)]
    if config.stage == "sparsify":
        groups.append((model.gamma_arrays(), config.gamma_lr))
    budget = config.budget()
    optimizer = Adam(groups)
    cosine = CosineSchedule(config.base_lr, config.lr_floor, config.cosine_horizon or max(budget, 1))
    clips = validation_clips(config)

    out_path = Path(out_dir) if out_dir is not None else None
    trajectory = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "stage_config.json").write_text(config.to_json(), encoding="utf-8")
        if config.stage == "sparsify":
            trajectory = TrajectoryLog(out_path / "gamma_trajectory.csv")

    rows: list[dict] = []
    for it in range(budget):
        seq = sample_sequence(config, config.seed + it)
        teacher_trace = None
        if config.loss_tf:
            # outside the tape: the teacher contributes no gradients
            teacher_trace = run_trace(teacher.spec, teacher.weights, seq, scaling=teacher.scaling)
        with Tape() as tape:
            sr, trace = run_network(model.spec, model.weights, seq, scaling=model.scaling)
            loss_rec = reconstruction_loss(sr, seq.hr_frames, config.eps) if config.loss_rec else Scalar(0.0)
            total = loss_rec
            loss_tf_val = ""
            if config.loss_tf:
                loss_tf = temporal_alignment_loss(trace, teacher_trace, config.tf_norm)
                total = total + loss_tf
                loss_tf_val = loss_tf.value
        loss_sir_val = ""
        if config.loss_sir:
            loss_sir_val = sparsity_penalty(model.scaling).value
        if not np.isfinite(total.value):
            raise RuntimeError(f"non-finite loss at iteration {it}: {total.value}")
        tape.backward(total)
        optimizer.step(tape, cosine.factor(it))

        alpha = ""
        if config.stage == "sparsify":
            step_schedule(model.scaling)
            decay_unimportant(model.scaling, config.gamma_decay)
            alpha = model.scaling.alpha
            if trajectory is not None:
                trajectory.append(model.scaling)

        row = {
            "iter": it,
            "loss_rec": loss_rec.value if config.loss_rec else "",
            "loss_sir": loss_sir_val,
            "loss_tf": loss_tf_val,
            "alpha": alpha,
        }
        if config.val_interval and (it + 1) % config.val_interval == 0:
            row["val_psnr"] = evaluate_psnr(model, clips)
        rows.append(row)
        if config.stage == "sparsify" and model.scaling.phase == PHASE_DONE:
            break

    if trajectory is not None:
        trajectory.close()
    if out_path is not None:
        _write_metrics(rows, out_path / "metrics.csv")
        save_checkpoint(out_path / "checkpoint", model.spec, model.weights, model.scaling)
        if rewrite_result is not None:
            (out_path / "fold_report.txt").write_text(rewrite_result.fold_report_text(), encoding="utf-8")
    return StageResult(model=model, rows=rows, plan=plan, rewrite=rewrite_result)


def replace_scaling(model: Model, config: StageConfig) -> Model:
    state = inject_scaling(model.spec, delta=config.delta, tau=config.tau, t1=config.t1, t2=config.t2)
    return Model(spec=model.spec, weights=model.weights, scaling=state)


# ---------------------------------------------------------------------------
# baseline schemes


def baseline_l1norm_plan(spec: NetworkSpec, weights: dict, ratio: float) -> PruningPlan:
    """No-last-conv baseline: prune only each block's first-conv filters, locally.

    The matched second-conv input channels shrink with them; read/write sets,
    entry convs, and the upsampler stay untouched, so the residual additions
    need no index bookkeeping.
    """
    full = plan_for(spec, weights, ratio, policy="min-local")
    mid_sites = {blk.mid_site for cell in spec.cells() for blk in cell.blocks}
    pruned = {site: idx for site, idx in full.pruned.items() if site in mid_sites}
    kept = {site: idx for site, idx in full.kept.items() if site in mid_sites}
    return PruningPlan(
        ratio=ratio,
        policy="min-local",
        seed=None,
        pruned=pruned,
        kept=kept,
        site_counts={s: n for s, n in full.site_counts.items() if s in mid_sites},
    )


def baseline_lite_spec(spec: NetworkSpec, width_factor: float) -> NetworkSpec:
    """Scratch-trained narrow variant: every width scaled by the factor."""
    trunk = spec.forward_cell.trunk_width
    new_width = trunk * width_factor
    if abs(new_width - round(new_width)) > 1e-9 or round(new_width) < 1:
        raise ValueError(f"width factor {width_factor} does not give an integer trunk width")
    blocks = len(spec.forward_cell.blocks)
    return make_network(
        trunk_width=int(round(new_width)),
        blocks_per_cell=blocks,
        bidirectional=spec.bidirectional,
        image_channels=spec.forward_cell.image_channels,
        bias=spec.upsampler[0].bias,
        activation_slope=spec.activation_slope,
        metadata=dict(spec.metadata),
    )
