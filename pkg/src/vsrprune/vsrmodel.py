"""Executable recurrent SR network: propagation, upsampling head, hidden traces.

One evaluator covers three network states. A plain network runs dense
convs; an instrumented network additionally applies per-site scaling
factors (fused into the conv in float64, so all-ones scaling is exact); a
pruned network gathers/scatters explicit kept-channel index sets carried
by the spec. Alignment of the propagated hidden state is an oracle integer
shift with zero fill, standing in for a learned flow estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .graphir import NetworkSpec, RecurrentCellSpec
from .regularizer import ScalingState, entry_gamma_in, shuffle_gamma_expanded, site_gamma
from .tensorcore import KernelTensor, ShapeError, ValueTensor


@dataclass
class Sequence:
    """T low-resolution frames with optional HR targets and known integer motion.

    ``motion[i]`` is the (dy, dx) displacement of scene content from frame i
    to frame i+1, in LR pixels.
    """

    frames: list[ValueTensor]
    hr_frames: list[ValueTensor] | None = None
    motion: list[tuple[int, int]] | None = None

    def __post_init__(self) -> None:
        shapes = {f.shape for f in self.frames}
        if len(shapes) != 1:
            raise ShapeError(f"sequence frames disagree on shape: {shapes}")
        if self.motion is not None and len(self.motion) != len(self.frames) - 1:
            raise ShapeError(
                f"motion list length {len(self.motion)} != T-1 = {len(self.frames) - 1}"
            )

    def __len__(self) -> int:
        return len(self.frames)

    def step_motion(self, i: int) -> tuple[int, int]:
        if self.motion is None:
            return (0, 0)
        return self.motion[i]


@dataclass
class HiddenTrace:
    """Per-timestep hidden states; index t matches the frame index.

    ``backward[0]`` is the state after the full backward propagation,
    ``forward[-1]`` after the full forward propagation.
    """

    forward: list[ValueTensor]
    backward: list[ValueTensor] | None

    @property
    def final_forward(self) -> ValueTensor:
        return self.forward[-1]

    @property
    def final_backward(self) -> ValueTensor:
        if self.backward is None:
            raise ValueError("unidirectional trace has no backward states")
        return self.backward[0]


def _weights_for(weights: dict[str, KernelTensor], layer_id: str) -> KernelTensor:
    try:
        return weights[layer_id]
    except KeyError:
        raise KeyError(f"no weights for layer {layer_id}") from None


def run_cell(
    cell: RecurrentCellSpec,
    weights: dict[str, KernelTensor],
    frame: ValueTensor,
    prev_state: ValueTensor,
    motion: tuple[int, int],
    slope: float,
    scaling: ScalingState | None = None,
) -> ValueTensor:
    """One recurrent step: align previous state, concat with the frame, run the trunk."""
    if prev_state.shape[1] != cell.trunk_width:
        raise ShapeError(
            f"{cell.name}: hidden state has {prev_state.shape[1]} channels, "
            f"trunk width is {cell.trunk_width}"
        )
    aligned = tc.shift2d(prev_state, motion[0], motion[1])
    entry = cell.entry
    hidden_in = aligned
    if entry.read_indices is not None:
        hidden_in = tc.gather_channels(aligned, entry.read_indices)
    x = tc.concat_channels([frame, hidden_in])
    y = tc.conv2d(
        x,
        _weights_for(weights, entry.id),
        stride=entry.stride,
        padding=entry.padding,
        gamma_in=entry_gamma_in(scaling, entry.id, cell.trunk_width),
        gamma_out=site_gamma(scaling, f"{entry.id}:out"),
    )
    if entry.write_indices is not None:
        y = tc.scatter_channels(y, entry.write_indices, cell.trunk_width)
    trunk = tc.leaky_relu(y, slope)

    for blk in cell.blocks:
        u = trunk
        if blk.conv1.read_indices is not None:
            u = tc.gather_channels(trunk, blk.conv1.read_indices)
        y = tc.conv2d(
            u,
            _weights_for(weights, blk.conv1.id),
            stride=blk.conv1.stride,
            padding=blk.conv1.padding,
            gamma_in=site_gamma(scaling, blk.read_site),
            gamma_out=site_gamma(scaling, blk.mid_site),
        )
        y = tc.leaky_relu(y, slope)
        z = tc.conv2d(
            y,
            _weights_for(weights, blk.conv2.id),
            stride=blk.conv2.stride,
            padding=blk.conv2.padding,
            gamma_out=site_gamma(scaling, blk.write_site),
        )
        if blk.conv2.write_indices is not None:
            trunk = tc.scatter_add_channels(trunk, z, blk.conv2.write_indices)
        else:
            trunk = tc.add(trunk, z)
    return trunk


def _propagate(
    cell: RecurrentCellSpec,
    weights: dict[str, KernelTensor],
    seq: Sequence,
    slope: float,
    scaling: ScalingState | None,
) -> list[ValueTensor]:
    t = len(seq)
    b, _, h, w = seq.frames[0].shape
    state = ValueTensor.zeros((b, cell.trunk_width, h, w))
    states: list[ValueTensor | None] = [None] * t
    if cell.direction == "forward":
        order = range(t)
    else:
        order = range(t - 1, -1, -1)
    for step, i in enumerate(order):
        if step == 0:
            motion = (0, 0)
        elif cell.direction == "forward":
            motion = seq.step_motion(i - 1)
        else:
            dy, dx = seq.step_motion(i)
            motion = (-dy, -dx)
        state = run_cell(cell, weights, seq.frames[i], state, motion, slope, scaling)
        states[i] = state
    return states  # type: ignore[return-value]


def _upsample(
    spec: NetworkSpec,
    weights: dict[str, KernelTensor],
    frame: ValueTensor,
    feat: ValueTensor,
    scaling: ScalingState | None,
) -> ValueTensor:
    slope = spec.activation_slope
    fuse, s1, _, s2, _, hr, rgb, _ = spec.upsampler
    y = tc.conv2d(feat, _weights_for(weights, fuse.id), stride=fuse.stride, padding=fuse.padding)
    y = tc.leaky_relu(y, slope)
    for layer in (s1, s2):
        y = tc.conv2d(
            y,
            _weights_for(weights, layer.id),
            stride=layer.stride,
            padding=layer.padding,
            gamma_out=shuffle_gamma_expanded(scaling, layer.id),
        )
        y = tc.pixel_shuffle(y, 2)
        y = tc.leaky_relu(y, slope)
    y = tc.conv2d(
        y,
        _weights_for(weights, hr.id),
        stride=hr.stride,
        padding=hr.padding,
        gamma_out=site_gamma(scaling, f"{hr.id}:out"),
    )
    y = tc.leaky_relu(y, slope)
    y = tc.conv2d(y, _weights_for(weights, rgb.id), stride=rgb.stride, padding=rgb.padding)
    return tc.add(y, tc.bilinear_resize(frame, spec.scale))


def run_trace(
    spec: NetworkSpec,
    weights: dict[str, KernelTensor],
    seq: Sequence,
    scaling: ScalingState | None = None,
) -> HiddenTrace:
    """Propagation only: the hidden trace without the upsampling head."""
    slope = spec.activation_slope
    backward_states = None
    if spec.backward_cell is not None:
        backward_states = _propagate(spec.backward_cell, weights, seq, slope, scaling)
    forward_states = _propagate(spec.forward_cell, weights, seq, slope, scaling)
    return HiddenTrace(forward=forward_states, backward=backward_states)


def run_network(
    spec: NetworkSpec,
    weights: dict[str, KernelTensor],
    seq: Sequence,
    scaling: ScalingState | None = None,
) -> tuple[list[ValueTensor], HiddenTrace]:
    """Full pass over a sequence: per-frame SR outputs plus the hidden trace."""
    trace = run_trace(spec, weights, seq, scaling)
    sr_frames = []
    for i, frame in enumerate(seq.frames):
        if trace.backward is not None:
            feat = tc.concat_channels([trace.forward[i], trace.backward[i]])
        else:
            feat = trace.forward[i]
        sr_frames.append(_upsample(spec, weights, frame, feat, scaling))
    return sr_frames, trace


def stack_frames(frames: list[ValueTensor]) -> ValueTensor:
    """Concatenate single-frame tensors along the batch axis (for frame-mean losses)."""
    return tc.concat_batch(frames)


def hidden_error_profile(
    full: tuple[NetworkSpec, dict, ScalingState | None],
    pruned: tuple[NetworkSpec, dict, ScalingState | None],
    seq: Sequence,
) -> dict[str, list[float]]:
    """Per-timestep mean absolute hidden-state error between two models."""
    spec_a, w_a, s_a = full
    spec_b, w_b, s_b = pruned
    if spec_a.trunk_width != spec_b.trunk_width:
        raise ShapeError(
            f"trunk widths differ: {spec_a.trunk_width} vs {spec_b.trunk_width}"
        )
    trace_a = run_trace(spec_a, w_a, seq, scaling=s_a)
    trace_b = run_trace(spec_b, w_b, seq, scaling=s_b)
    out: dict[str, list[float]] = {
        "forward": [
            float(np.abs(a.data.astype(np.float64) - b.data.astype(np.float64)).mean())
            for a, b in zip(trace_a.forward, trace_b.forward)
        ]
    }
    if trace_a.backward is not None and trace_b.backward is not None:
        errs = [
            float(np.abs(a.data.astype(np.float64) - b.data.astype(np.float64)).mean())
            for a, b in zip(trace_a.backward, trace_b.backward)
        ]
        out["backward"] = errs[::-1]  # in propagation order (t = T .. 1)
    return out
