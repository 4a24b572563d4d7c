"""The pruning compiler: physically rewrite a network to its kept units.

Residual blocks keep the trunk at full channel width: the first conv
gathers only the kept trunk channels (read set), the second conv
scatter-adds its surviving filters back into the trunk (write set), and
surviving scaling factors are folded into the kept weights so the compiled
network carries no scaling sites at all. Convs feeding a 2x pixel shuffle
are pruned in four-filter groups so channel-space conversion stays aligned,
and each consumer's input channels shrink to match. The 1x1 fusion conv is
never pruned.

The compiled network reproduces the instrumented network with its pruned
factors forced to zero (masked equivalence), while its cost model counts
genuinely fewer parameters and MACs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .graphir import (
    IMAGE_CHANNELS,
    LayerSpec,
    NetworkSpec,
    RecurrentCellSpec,
    ResidualBlockSpec,
    require_valid,
)
from .regularizer import ScalingState
from .scoring import PruningPlan
from .tensorcore import KernelTensor, conv_output_size


class RewriteError(ValueError):
    """A rewrite step received an empty or inconsistent kept set."""


# ---------------------------------------------------------------------------
# cost model


@dataclass(frozen=True)
class CostRow:
    layer: str
    subnet: str
    params: int
    macs: int


@dataclass
class CostReport:
    """Exact parameter and MAC counts per conv layer, per frame.

    Convention: 1 MAC = 1 FLOP; bias adds, activations, shuffles, and
    gather/scatter bookkeeping are excluded. Recurrent cells are counted
    once per frame at LR resolution; the upsampling head at its own growing
    resolutions.
    """

    rows: list[CostRow]
    resolution: tuple[int, int]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def subnet_params(self, subnet: str) -> int:
        return sum(r.params for r in self.rows if r.subnet == subnet)

    def subnet_macs(self, subnet: str) -> int:
        return sum(r.macs for r in self.rows if r.subnet == subnet)

    def subnet_share(self, subnet: str) -> float:
        total = self.total_macs
        return self.subnet_macs(subnet) / total if total else 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "params", "macs", "subnet"])
            for r in self.rows:
                writer.writerow([r.layer, r.params, r.macs, r.subnet])
            writer.writerow(["total", self.total_params, self.total_macs, ""])

    def summary(self) -> str:
        subnets = sorted({r.subnet for r in self.rows})
        lines = [
            f"resolution {self.resolution[0]}x{self.resolution[1]} (LR), per frame",
            f"params {self.total_params:,}  macs {self.total_macs:,}",
        ]
        for s in subnets:
            lines.append(
                f"  {s}: params {self.subnet_params(s):,}  macs {self.subnet_macs(s):,}"
                f"  ({100 * self.subnet_share(s):.1f}% of macs)"
            )
        return "\n".join(lines)


def _conv_cost(layer: LayerSpec, h: int, w: int) -> tuple[int, int]:
    cout, cin, kh, kw = layer.weight_shape()
    params = cout * cin * kh * kw + (cout if layer.bias else 0)
    ho = conv_output_size(h, kh, layer.stride, layer.padding)
    wo = conv_output_size(w, kw, layer.stride, layer.padding)
    macs = ho * wo * cout * cin * kh * kw
    return params, macs


def cost(spec: NetworkSpec, resolution: tuple[int, int]) -> CostReport:
    """Per-frame parameter/MAC report at the given LR resolution."""
    require_valid(spec)
    h, w = resolution
    rows: list[CostRow] = []
    for cell in spec.cells():
        for layer in [cell.entry] + [l for blk in cell.blocks for l in (blk.conv1, blk.conv2)]:
            p, m = _conv_cost(layer, h, w)
            rows.append(CostRow(layer.id, cell.name, p, m))
    fuse, s1, _, s2, _, hr, rgb, _ = spec.upsampler
    for layer, res in ((fuse, (h, w)), (s1, (h, w)), (s2, (2 * h, 2 * w)), (hr, (4 * h, 4 * w)), (rgb, (4 * h, 4 * w))):
        p, m = _conv_cost(layer, *res)
        rows.append(CostRow(layer.id, "upsampler", p, m))
    return CostReport(rows=rows, resolution=(h, w))


# ---------------------------------------------------------------------------
# folding helpers


def _positions(current: list[int] | None, width: int) -> list[int]:
    return list(current) if current is not None else list(range(width))


def _kept_positions(plan: PruningPlan, site: str, width: int) -> list[int]:
    kept = plan.kept.get(site)
    if kept is None:
        return list(range(width))
    if not kept:
        raise RewriteError(f"plan keeps no units at site {site}")
    if max(kept) >= width:
        raise RewriteError(f"plan index {max(kept)} out of range at site {site} (width {width})")
    return list(kept)


def _gamma(scaling: ScalingState | None, site: str, width: int) -> np.ndarray:
    if scaling is None or site not in scaling.factors:
        return np.ones(width, dtype=np.float64)
    vec = scaling.factors[site]
    if vec.size != width:
        raise RewriteError(f"scaling vector at {site} has {vec.size} entries, expected {width}")
    return vec.astype(np.float64)


def _fold(
    kernel: KernelTensor,
    row_pos: list[int],
    col_pos: list[int],
    row_scale: np.ndarray,
    col_scale: np.ndarray,
) -> KernelTensor:
    """Select kept rows/columns and fold their scaling factors, in float64."""
    w = kernel.data.astype(np.float64)
    w = w * col_scale[None, :, None, None]
    w = w * row_scale[:, None, None, None]
    w = w[np.ix_(row_pos, col_pos)]
    bias = None
    if kernel.bias is not None:
        bias = (kernel.bias.astype(np.float64) * row_scale)[row_pos].astype(np.float32)
    return KernelTensor(w.astype(np.float32), bias)


# ---------------------------------------------------------------------------
# rewrites


def apply_rsc_rewrite(
    block: ResidualBlockSpec,
    weights: dict[str, KernelTensor],
    scaling: ScalingState | None,
    read_pos: list[int],
    mid_pos: list[int],
    write_pos: list[int],
) -> tuple[ResidualBlockSpec, dict[str, KernelTensor]]:
    """Rewrite one residual block to its kept read/mid/write sets.

    The first conv becomes |mid| x |read| with read- and mid-site factors
    folded in (bias folds the mid factor); the second conv becomes
    |write| x |mid| with the write-site factor folded. Execution gathers the
    read channels from the trunk and scatter-adds into the write channels,
    so the trunk keeps its full width.
    """
    if not read_pos or not mid_pos or not write_pos:
        raise RewriteError(f"{block.id}: empty kept set")
    c1, c2 = block.conv1, block.conv2
    cur_reads = _positions(c1.read_indices, block.trunk_width)
    cur_writes = _positions(c2.write_indices, block.trunk_width)
    new_reads = [cur_reads[i] for i in read_pos]
    new_writes = [cur_writes[i] for i in write_pos]

    g_read = _gamma(scaling, f"{c1.id}:in", c1.in_channels)
    g_mid = _gamma(scaling, f"{c1.id}:out", c1.out_channels)
    g_write = _gamma(scaling, f"{c2.id}:out", c2.out_channels)

    w1 = _fold(weights[c1.id], mid_pos, read_pos, g_mid, g_read)
    w2 = _fold(weights[c2.id], write_pos, mid_pos, g_write, np.ones(c2.in_channels))

    new_c1 = replace(
        c1,
        out_channels=len(mid_pos),
        in_channels=len(read_pos),
        prune_out=False,
        prune_in=False,
        read_indices=new_reads if len(new_reads) < block.trunk_width else None,
    )
    new_c2 = replace(
        c2,
        out_channels=len(write_pos),
        in_channels=len(mid_pos),
        prune_out=False,
        write_indices=new_writes if len(new_writes) < block.trunk_width else None,
    )
    new_block = ResidualBlockSpec(id=block.id, conv1=new_c1, conv2=new_c2, trunk_width=block.trunk_width)
    return new_block, {c1.id: w1, c2.id: w2}


def apply_shuffle_rewrite(
    layer: LayerSpec,
    kernel: KernelTensor,
    scaling: ScalingState | None,
    group_pos: list[int],
    col_pos: list[int],
) -> tuple[LayerSpec, KernelTensor]:
    """Prune an upsample conv in four-filter groups, folding the group factors.

    ``group_pos`` are kept group positions; each expands to its four
    consecutive filter rows so the following 2x pixel shuffle still converts
    aligned channel quadruples. ``col_pos`` are the kept input columns
    (the producer's surviving post-shuffle channels).
    """
    if not group_pos:
        raise RewriteError(f"{layer.id}: empty kept group set")
    if layer.out_channels % 4 != 0:
        raise RewriteError(f"{layer.id}: out_channels {layer.out_channels} not group-aligned")
    g_vec = _gamma(scaling, f"{layer.id}:group", layer.out_channels // 4)
    row_scale = np.repeat(g_vec, 4)
    row_pos = [4 * g + j for g in group_pos for j in range(4)]
    folded = _fold(kernel, row_pos, col_pos, row_scale, np.ones(layer.in_channels))
    cur_groups = _positions(layer.group_indices, layer.out_channels // 4)
    new_groups = [cur_groups[i] for i in group_pos]
    new_layer = replace(
        layer,
        out_channels=4 * len(group_pos),
        in_channels=len(col_pos),
        prune_groups=False,
        group_indices=new_groups if layer.group_indices is not None or len(new_groups) < len(cur_groups) else None,
    )
    return new_layer, folded


def _rewrite_entry(
    cell: RecurrentCellSpec,
    weights: dict[str, KernelTensor],
    scaling: ScalingState | None,
    plan: PruningPlan,
) -> tuple[LayerSpec, KernelTensor, dict[str, list[int]]]:
    entry = cell.entry
    cur_reads = _positions(entry.read_indices, cell.trunk_width)
    cur_writes = _positions(entry.write_indices, cell.trunk_width)
    read_pos = _kept_positions(plan, f"{entry.id}:in", len(cur_reads))
    write_pos = _kept_positions(plan, f"{entry.id}:out", len(cur_writes))
    g_read = _gamma(scaling, f"{entry.id}:in", len(cur_reads))
    g_write = _gamma(scaling, f"{entry.id}:out", len(cur_writes))
    col_scale = np.concatenate([np.ones(IMAGE_CHANNELS), g_read])
    col_pos = list(range(IMAGE_CHANNELS)) + [IMAGE_CHANNELS + i for i in read_pos]
    folded = _fold(weights[entry.id], write_pos, col_pos, g_write, col_scale)
    new_reads = [cur_reads[i] for i in read_pos]
    new_writes = [cur_writes[i] for i in write_pos]
    new_entry = replace(
        entry,
        out_channels=len(write_pos),
        in_channels=IMAGE_CHANNELS + len(read_pos),
        prune_out=False,
        prune_in=False,
        read_indices=new_reads if len(new_reads) < cell.trunk_width else None,
        write_indices=new_writes if len(new_writes) < cell.trunk_width else None,
    )
    kept = {f"{entry.id}:in": new_reads, f"{entry.id}:out": new_writes}
    return new_entry, folded, kept


@dataclass
class RewriteResult:
    """Output of the pruning compiler."""

    spec: NetworkSpec
    weights: dict[str, KernelTensor]
    kept: dict[str, list[int]]
    fold_report: list[str]
    cost_before: CostReport
    cost_after: CostReport

    def fold_report_text(self) -> str:
        return "\n".join(self.fold_report) + "\n"


def compile_plan(
    spec: NetworkSpec,
    weights: dict[str, KernelTensor],
    scaling: ScalingState | None,
    plan: PruningPlan,
    resolution: tuple[int, int] = (32, 32),
) -> RewriteResult:
    """Compile (network, weights, scaling, plan) into a physically smaller network.

    Every residual block gets the gather/scatter rewrite, the upsample convs
    the grouped rewrite with consumer input channels shrunk to match, and the
    entry convs scatter their kept filters into the full-width trunk. The
    fusion 1x1 conv is untouched. The result carries no scaling sites and
    folds all surviving factors into its weights.
    """
    require_valid(spec)
    known_sites = {f"{layer.id}:{suffix}" for layer, _ in spec.conv_layers() for suffix in ("in", "out", "group")}
    for site in plan.kept:
        if site not in known_sites:
            raise RewriteError(f"plan references unknown site {site}")

    new_weights: dict[str, KernelTensor] = {}
    kept_sets: dict[str, list[int]] = {}
    report: list[str] = []

    def rewrite_cell(cell: RecurrentCellSpec) -> RecurrentCellSpec:
        new_entry, folded, kept = _rewrite_entry(cell, weights, scaling, plan)
        new_weights[cell.entry.id] = folded
        kept_sets.update(kept)
        report.append(
            f"{cell.entry.id}: kept {len(kept[f'{cell.entry.id}:in'])} hidden reads, "
            f"{len(kept[f'{cell.entry.id}:out'])} filters scattered into trunk"
        )
        new_blocks = []
        for blk in cell.blocks:
            read_pos = _kept_positions(plan, blk.read_site, blk.conv1.in_channels)
            mid_pos = _kept_positions(plan, blk.mid_site, blk.conv1.out_channels)
            write_pos = _kept_positions(plan, blk.write_site, blk.conv2.out_channels)
            new_blk, folded_blk = apply_rsc_rewrite(blk, weights, scaling, read_pos, mid_pos, write_pos)
            new_weights.update(folded_blk)
            cur_reads = _positions(blk.conv1.read_indices, blk.trunk_width)
            cur_writes = _positions(blk.conv2.write_indices, blk.trunk_width)
            kept_sets[blk.read_site] = [cur_reads[i] for i in read_pos]
            kept_sets[blk.mid_site] = list(mid_pos)
            kept_sets[blk.write_site] = [cur_writes[i] for i in write_pos]
            report.append(
                f"{blk.id}: reads {len(read_pos)}/{len(cur_reads)}, "
                f"mids {len(mid_pos)}/{blk.conv1.out_channels}, "
                f"writes {len(write_pos)}/{len(cur_writes)}"
            )
            new_blocks.append(new_blk)
        return RecurrentCellSpec(
            name=cell.name,
            direction=cell.direction,
            trunk_width=cell.trunk_width,
            image_channels=cell.image_channels,
            entry=new_entry,
            blocks=new_blocks,
        )

    new_forward = rewrite_cell(spec.forward_cell)
    new_backward = rewrite_cell(spec.backward_cell) if spec.backward_cell is not None else None

    fuse, s1, ps1, s2, ps2, hr, rgb, skip = spec.upsampler
    new_weights[fuse.id] = weights[fuse.id].copy()

    g1_pos = _kept_positions(plan, f"{s1.id}:group", s1.out_channels // 4)
    new_s1, w_s1 = apply_shuffle_rewrite(s1, weights[s1.id], scaling, g1_pos, list(range(s1.in_channels)))
    new_weights[s1.id] = w_s1
    kept_sets[f"{s1.id}:group"] = [_positions(s1.group_indices, s1.out_channels // 4)[i] for i in g1_pos]

    g2_pos = _kept_positions(plan, f"{s2.id}:group", s2.out_channels // 4)
    new_s2, w_s2 = apply_shuffle_rewrite(s2, weights[s2.id], scaling, g2_pos, g1_pos)
    new_weights[s2.id] = w_s2
    kept_sets[f"{s2.id}:group"] = [_positions(s2.group_indices, s2.out_channels // 4)[i] for i in g2_pos]

    hr_pos = _kept_positions(plan, f"{hr.id}:out", hr.out_channels)
    g_hr = _gamma(scaling, f"{hr.id}:out", hr.out_channels)
    new_weights[hr.id] = _fold(weights[hr.id], hr_pos, g2_pos, g_hr, np.ones(hr.in_channels))
    new_hr = replace(hr, out_channels=len(hr_pos), in_channels=len(g2_pos), prune_out=False)
    kept_sets[f"{hr.id}:out"] = list(hr_pos)

    new_weights[rgb.id] = _fold(
        weights[rgb.id], list(range(rgb.out_channels)), hr_pos, np.ones(rgb.out_channels), np.ones(rgb.in_channels)
    )
    new_rgb = replace(rgb, in_channels=len(hr_pos))
    report.append(
        f"upsampler: groups {len(g1_pos)}/{s1.out_channels // 4} + {len(g2_pos)}/{s2.out_channels // 4}, "
        f"hr filters {len(hr_pos)}/{hr.out_channels}; fusion conv untouched"
    )

    new_spec = NetworkSpec(
        forward_cell=new_forward,
        backward_cell=new_backward,
        upsampler=[replace(fuse), new_s1, replace(ps1), new_s2, replace(ps2), new_hr, new_rgb, replace(skip)],
        scale=spec.scale,
        activation_slope=spec.activation_slope,
        alignment=spec.alignment,
        metadata=dict(spec.metadata),
    )
    require_valid(new_spec)
    return RewriteResult(
        spec=new_spec,
        weights=new_weights,
        kept=kept_sets,
        fold_report=report,
        cost_before=cost(spec, resolution),
        cost_after=cost(new_spec, resolution),
    )
