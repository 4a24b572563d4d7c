"""Declarative network description, validation, and checkpoint serialization.

The IR describes exactly one network family: a recurrent SR trunk made of
residual blocks (bidirectional or unidirectional), a 1x1 fusion conv, a
two-stage pixel-shuffle upsampling head with a bilinear skip of the input
frame, and oracle integer-shift alignment in place of a learned flow
estimator. Both the trainer and the pruning compiler operate on these
specs; pruned specs carry explicit kept-index lists, unpruned specs carry
``None``.

Checkpoints are directories holding a line-oriented manifest, a raw
little-endian float32 blob, the spec as JSON, and (optionally) the scaling
state. The manifest/blob split keeps index-set surgery during the rewrite
auditable, and round-trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .tensorcore import KernelTensor

MANIFEST_FILE = "manifest.txt"
BLOB_FILE = "weights.bin"
SPEC_FILE = "netspec.json"
SCALING_FILE = "scaling.json"

IMAGE_CHANNELS = 3

CONV_KINDS = {"conv", "fusion_conv_1x1", "upsample_conv"}
LAYER_KINDS = CONV_KINDS | {"pixel_shuffle", "activation", "bilinear_skip", "concat", "scatter_residual"}


class SpecError(ValueError):
    """A NetworkSpec violates its invariants."""


class CheckpointError(IOError):
    """A checkpoint directory is missing, inconsistent, or truncated."""


@dataclass
class LayerSpec:
    """One layer of the network with its prunable sites.

    ``read_indices``/``write_indices`` are kept-channel lists produced by the
    pruning rewrite: reads gather from a full-width source, writes scatter
    into a full-width destination. ``group_indices`` records which shuffle
    groups of an upsample conv were kept. ``None`` means "all".
    """

    id: str
    kind: str
    out_channels: int = 0
    in_channels: int = 0
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    bias: bool = True
    prune_out: bool = False
    prune_in: bool = False
    prune_groups: bool = False
    read_indices: list[int] | None = None
    write_indices: list[int] | None = None
    group_indices: list[int] | None = None

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)


@dataclass
class ResidualBlockSpec:
    """Two 3x3 convs with a skip over a full-width trunk.

    After pruning, ``conv1.read_indices`` lists the trunk channels the block
    reads and ``conv2.write_indices`` the trunk channels it adds back into;
    the trunk itself always stays ``trunk_width`` channels wide.
    """

    id: str
    conv1: LayerSpec
    conv2: LayerSpec
    trunk_width: int

    @property
    def read_site(self) -> str:
        return f"{self.conv1.id}:in"

    @property
    def mid_site(self) -> str:
        return f"{self.conv1.id}:out"

    @property
    def write_site(self) -> str:
        return f"{self.conv2.id}:out"


@dataclass
class RecurrentCellSpec:
    """Entry conv plus residual chain, run once per frame in one direction."""

    name: str
    direction: str  # "forward" | "backward"
    trunk_width: int
    image_channels: int
    entry: LayerSpec
    blocks: list[ResidualBlockSpec]


@dataclass
class NetworkSpec:
    forward_cell: RecurrentCellSpec
    backward_cell: RecurrentCellSpec | None
    upsampler: list[LayerSpec]
    scale: int = 4
    activation_slope: float = 0.1
    alignment: str = "oracle_shift"
    metadata: dict = field(default_factory=dict)

    @property
    def bidirectional(self) -> bool:
        return self.backward_cell is not None

    @property
    def trunk_width(self) -> int:
        return self.forward_cell.trunk_width

    def cells(self) -> list[RecurrentCellSpec]:
        out = [self.forward_cell]
        if self.backward_cell is not None:
            out.append(self.backward_cell)
        return out

    def conv_layers(self) -> list[tuple[LayerSpec, str]]:
        """All conv-bearing layers with their subnetwork tag."""
        layers = []
        for cell in self.cells():
            layers.append((cell.entry, cell.name))
            for blk in cell.blocks:
                layers.append((blk.conv1, cell.name))
                layers.append((blk.conv2, cell.name))
        for layer in self.upsampler:
            if layer.kind in CONV_KINDS:
                layers.append((layer, "upsampler"))
        return layers


# ---------------------------------------------------------------------------
# construction helpers


def make_network(
    trunk_width: int,
    blocks_per_cell: int,
    bidirectional: bool = True,
    image_channels: int = IMAGE_CHANNELS,
    bias: bool = True,
    activation_slope: float = 0.1,
    metadata: dict | None = None,
) -> NetworkSpec:
    """Build the reference recurrent SR network at the given width/depth."""

    def cell(name: str, direction: str) -> RecurrentCellSpec:
        entry = LayerSpec(
            id=f"{name}.entry",
            kind="conv",
            out_channels=trunk_width,
            in_channels=image_channels + trunk_width,
            bias=bias,
            prune_out=True,
            prune_in=True,  # hidden-state input channels only; image channels never prune
        )
        blocks = []
        for i in range(blocks_per_cell):
            conv1 = LayerSpec(
                id=f"{name}.b{i}.c1",
                kind="conv",
                out_channels=trunk_width,
                in_channels=trunk_width,
                bias=bias,
                prune_out=True,
                prune_in=True,
            )
            conv2 = LayerSpec(
                id=f"{name}.b{i}.c2",
                kind="conv",
                out_channels=trunk_width,
                in_channels=trunk_width,
                bias=bias,
                prune_out=True,
            )
            blocks.append(ResidualBlockSpec(id=f"{name}.b{i}", conv1=conv1, conv2=conv2, trunk_width=trunk_width))
        return RecurrentCellSpec(
            name=name,
            direction=direction,
            trunk_width=trunk_width,
            image_channels=image_channels,
            entry=entry,
            blocks=blocks,
        )

    fusion_in = 2 * trunk_width if bidirectional else trunk_width
    upsampler = [
        LayerSpec(
            id="up.fuse",
            kind="fusion_conv_1x1",
            out_channels=trunk_width,
            in_channels=fusion_in,
            kernel_size=1,
            padding=0,
            bias=bias,
        ),
        LayerSpec(
            id="up.s1",
            kind="upsample_conv",
            out_channels=4 * trunk_width,
            in_channels=trunk_width,
            bias=bias,
            prune_groups=True,
        ),
        LayerSpec(id="up.ps1", kind="pixel_shuffle", out_channels=0, in_channels=0, kernel_size=2),
        LayerSpec(
            id="up.s2",
            kind="upsample_conv",
            out_channels=4 * trunk_width,
            in_channels=trunk_width,
            bias=bias,
            prune_groups=True,
        ),
        LayerSpec(id="up.ps2", kind="pixel_shuffle", out_channels=0, in_channels=0, kernel_size=2),
        LayerSpec(
            id="up.hr",
            kind="conv",
            out_channels=trunk_width,
            in_channels=trunk_width,
            bias=bias,
            prune_out=True,
        ),
        LayerSpec(
            id="up.rgb",
            kind="conv",
            out_channels=image_channels,
            in_channels=trunk_width,
            bias=bias,
        ),
        LayerSpec(id="up.skip", kind="bilinear_skip", out_channels=0, in_channels=0, kernel_size=4),
    ]
    return NetworkSpec(
        forward_cell=cell("forward", "forward"),
        backward_cell=cell("backward", "backward") if bidirectional else None,
        upsampler=upsampler,
        activation_slope=activation_slope,
        metadata=dict(metadata or {}),
    )


# ---------------------------------------------------------------------------
# validation


def validate(spec: NetworkSpec) -> list[str]:
    """Check every spec invariant; an empty list means the spec is well formed."""
    violations: list[str] = []
    seen_ids: set[str] = set()

    def check_layer(layer: LayerSpec) -> None:
        if layer.id in seen_ids:
            violations.append(f"{layer.id}: duplicate layer id")
        seen_ids.add(layer.id)
        if layer.kind not in LAYER_KINDS:
            violations.append(f"{layer.id}: unknown kind {layer.kind!r}")
        if layer.kind in CONV_KINDS:
            if min(layer.weight_shape()) < 1:
                violations.append(f"{layer.id}: non-positive weight extent {layer.weight_shape()}")
            if layer.stride < 1 or layer.padding < 0:
                violations.append(f"{layer.id}: bad stride/padding")
        if layer.kind == "fusion_conv_1x1":
            if layer.kernel_size != 1:
                violations.append(f"{layer.id}: fusion conv must be 1x1")
            if layer.prune_out or layer.prune_in or layer.prune_groups:
                violations.append(f"{layer.id}: fusion conv is never prunable")
        if layer.kind == "upsample_conv" and layer.out_channels % 4 != 0:
            violations.append(f"{layer.id}: upsample conv out_channels {layer.out_channels} not divisible by 4")
        for name, idx, width in (
            ("read_indices", layer.read_indices, None),
            ("write_indices", layer.write_indices, None),
        ):
            if idx is not None:
                if len(idx) == 0:
                    violations.append(f"{layer.id}: empty {name}")
                elif sorted(set(idx)) != list(idx):
                    violations.append(f"{layer.id}: {name} must be sorted and unique")

    trunk = spec.forward_cell.trunk_width
    for cell in spec.cells():
        if cell.trunk_width != trunk:
            violations.append(f"{cell.name}: trunk width {cell.trunk_width} differs across cells")
        check_layer(cell.entry)
        expected_in = cell.image_channels + (
            len(cell.entry.read_indices) if cell.entry.read_indices is not None else cell.trunk_width
        )
        if cell.entry.in_channels != expected_in:
            violations.append(
                f"{cell.entry.id}: in_channels {cell.entry.in_channels} != image+hidden {expected_in}"
            )
        if cell.entry.write_indices is not None and any(
            not 0 <= i < cell.trunk_width for i in cell.entry.write_indices
        ):
            violations.append(f"{cell.entry.id}: write index outside trunk [0, {cell.trunk_width})")
        for blk in cell.blocks:
            if blk.trunk_width != cell.trunk_width:
                violations.append(f"{blk.id}: block trunk width differs from cell")
            check_layer(blk.conv1)
            check_layer(blk.conv2)
            reads = blk.conv1.read_indices
            writes = blk.conv2.write_indices
            expect_c1_in = len(reads) if reads is not None else blk.trunk_width
            expect_c2_out = len(writes) if writes is not None else blk.trunk_width
            if blk.conv1.in_channels != expect_c1_in:
                violations.append(f"{blk.conv1.id}: in_channels {blk.conv1.in_channels} != |reads| {expect_c1_in}")
            if blk.conv2.out_channels != expect_c2_out:
                violations.append(f"{blk.conv2.id}: out_channels {blk.conv2.out_channels} != |writes| {expect_c2_out}")
            if blk.conv2.in_channels != blk.conv1.out_channels:
                violations.append(
                    f"{blk.conv2.id}: in_channels {blk.conv2.in_channels} != {blk.conv1.id} out {blk.conv1.out_channels}"
                )
            for name, idx in (("read", reads), ("write", writes)):
                if idx is not None and any(not 0 <= i < blk.trunk_width for i in idx):
                    violations.append(f"{blk.id}: {name} index outside trunk [0, {blk.trunk_width})")

    for layer in spec.upsampler:
        check_layer(layer)
    kinds = [l.kind for l in spec.upsampler]
    expected_kinds = [
        "fusion_conv_1x1",
        "upsample_conv",
        "pixel_shuffle",
        "upsample_conv",
        "pixel_shuffle",
        "conv",
        "conv",
        "bilinear_skip",
    ]
    if kinds != expected_kinds:
        violations.append(f"upsampler kinds {kinds} do not realise the x4 head {expected_kinds}")
    else:
        fuse, s1, ps1, s2, ps2, hr, rgb, skip = spec.upsampler
        fusion_in = 2 * trunk if spec.bidirectional else trunk
        if fuse.in_channels != fusion_in:
            violations.append(
                f"{fuse.id}: in_channels {fuse.in_channels} != "
                f"{'2*' if spec.bidirectional else ''}trunk_width {fusion_in}"
            )
        if s1.in_channels != fuse.out_channels:
            violations.append(f"{s1.id}: in_channels {s1.in_channels} != {fuse.id} out {fuse.out_channels}")
        if s2.in_channels != s1.out_channels // 4:
            violations.append(f"{s2.id}: in_channels {s2.in_channels} != post-shuffle {s1.out_channels // 4}")
        if hr.in_channels != s2.out_channels // 4:
            violations.append(f"{hr.id}: in_channels {hr.in_channels} != post-shuffle {s2.out_channels // 4}")
        if rgb.in_channels != hr.out_channels:
            violations.append(f"{rgb.id}: in_channels {rgb.in_channels} != {hr.id} out {hr.out_channels}")
        if rgb.out_channels != spec.forward_cell.image_channels:
            violations.append(f"{rgb.id}: out_channels {rgb.out_channels} != image channels")
        if rgb.prune_out or rgb.prune_in:
            violations.append(f"{rgb.id}: final RGB conv is never prunable")
        if ps1.kernel_size != 2 or ps2.kernel_size != 2 or skip.kernel_size != spec.scale:
            violations.append("upsampler does not realise exactly x4 scale")
    if spec.scale != 4:
        violations.append(f"scale {spec.scale} unsupported; the head realises x4")
    return violations


def require_valid(spec: NetworkSpec) -> None:
    violations = validate(spec)
    if violations:
        raise SpecError("; ".join(violations))


# ---------------------------------------------------------------------------
# weight initialization


def instantiate(spec: NetworkSpec, seed: int) -> dict[str, KernelTensor]:
    """Deterministic fan-in-scaled init.

    Each block's second conv and the final RGB conv are down-scaled by 0.1 so
    the residual trunk starts small and the initial output sits near the
    bilinear skip; deep recurrent trunks at desk scale train stably from
    there.
    """
    require_valid(spec)
    rng = np.random.default_rng(seed)
    damped = {blk.conv2.id for cell in spec.cells() for blk in cell.blocks}
    damped.add(spec.upsampler[-2].id)  # conv-to-RGB
    weights: dict[str, KernelTensor] = {}
    for layer, _ in spec.conv_layers():
        shape = layer.weight_shape()
        fan_in = shape[1] * shape[2] * shape[3]
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, shape).astype(np.float32)
        if layer.id in damped:
            w *= np.float32(0.1)
        b = np.zeros(shape[0], dtype=np.float32) if layer.bias else None
        weights[layer.id] = KernelTensor(w, b)
    return weights


# ---------------------------------------------------------------------------
# spec <-> json


def spec_to_json(spec: NetworkSpec) -> str:
    return json.dumps(asdict(spec), indent=1, sort_keys=True)


def _layer_from_dict(d: dict) -> LayerSpec:
    return LayerSpec(**d)


def _cell_from_dict(d: dict) -> RecurrentCellSpec:
    blocks = [
        ResidualBlockSpec(
            id=b["id"],
            conv1=_layer_from_dict(b["conv1"]),
            conv2=_layer_from_dict(b["conv2"]),
            trunk_width=b["trunk_width"],
        )
        for b in d["blocks"]
    ]
    return RecurrentCellSpec(
        name=d["name"],
        direction=d["direction"],
        trunk_width=d["trunk_width"],
        image_channels=d["image_channels"],
        entry=_layer_from_dict(d["entry"]),
        blocks=blocks,
    )


def spec_from_json(text: str) -> NetworkSpec:
    d = json.loads(text)
    return NetworkSpec(
        forward_cell=_cell_from_dict(d["forward_cell"]),
        backward_cell=_cell_from_dict(d["backward_cell"]) if d.get("backward_cell") else None,
        upsampler=[_layer_from_dict(l) for l in d["upsampler"]],
        scale=d.get("scale", 4),
        activation_slope=d.get("activation_slope", 0.1),
        alignment=d.get("alignment", "oracle_shift"),
        metadata=d.get("metadata", {}),
    )


# ---------------------------------------------------------------------------
# checkpoint I/O


def _collect_tensors(spec: NetworkSpec, weights: dict[str, KernelTensor], scaling=None) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for layer, _ in spec.conv_layers():
        kt = weights.get(layer.id)
        if kt is None:
            raise CheckpointError(f"missing weights for layer {layer.id}")
        if kt.data.shape != layer.weight_shape():
            raise CheckpointError(
                f"{layer.id}: weight shape {kt.data.shape} does not match spec {layer.weight_shape()}"
            )
        tensors[f"{layer.id}.weight"] = kt.data
        if layer.bias:
            if kt.bias is None:
                raise CheckpointError(f"{layer.id}: spec declares a bias but weights have none")
            tensors[f"{layer.id}.bias"] = kt.bias
    if scaling is not None:
        for site, vec in scaling.factors.items():
            tensors[f"{site}.gamma"] = vec
    return tensors


def save_checkpoint(path, spec: NetworkSpec, weights: dict[str, KernelTensor], scaling=None) -> None:
    """Write manifest + blob + spec (+ scaling state) into a directory."""
    require_valid(spec)
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    tensors = _collect_tensors(spec, weights, scaling)
    records = []
    blob = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        payload = arr.astype("<f4").tobytes()
        records.append((name, "float32", ",".join(str(e) for e in arr.shape), len(blob), len(payload)))
        blob.extend(payload)
    with open(out / MANIFEST_FILE, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(" ".join(str(f) for f in rec) + "\n")
    (out / BLOB_FILE).write_bytes(bytes(blob))
    (out / SPEC_FILE).write_text(spec_to_json(spec), encoding="utf-8")
    scaling_file = out / SCALING_FILE
    if scaling is not None:
        scaling_file.write_text(json.dumps(scaling.meta_dict(), indent=1, sort_keys=True), encoding="utf-8")
    elif scaling_file.exists():
        scaling_file.unlink()


def load_checkpoint(path):
    """Read back (spec, weights, scaling_state-or-None); bitwise inverse of save."""
    from .regularizer import ScalingState  # deferred: regularizer imports graphir

    root = Path(path)
    if not (root / MANIFEST_FILE).exists():
        raise CheckpointError(f"{root}: no {MANIFEST_FILE}")
    blob = (root / BLOB_FILE).read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for line in (root / MANIFEST_FILE).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            name, dtype, shape_s, offset_s, length_s = line.split(" ")
        except ValueError as exc:
            raise CheckpointError(f"malformed manifest line: {line!r}") from exc
        if dtype != "float32":
            raise CheckpointError(f"{name}: unsupported dtype {dtype}")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        offset, length = int(offset_s), int(length_s)
        if offset + length > len(blob):
            raise CheckpointError(f"{name}: blob truncated ({offset + length} > {len(blob)} bytes)")
        flat = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=offset)
        if flat.size * 4 != length or flat.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: shape {shape} does not match payload length {length}")
        tensors[name] = flat.reshape(shape).astype(np.float32)

    spec = spec_from_json((root / SPEC_FILE).read_text(encoding="utf-8"))
    weights: dict[str, KernelTensor] = {}
    for layer, _ in spec.conv_layers():
        wname = f"{layer.id}.weight"
        if wname not in tensors:
            raise CheckpointError(f"missing tensor {wname}")
        if tensors[wname].shape != layer.weight_shape():
            raise CheckpointError(
                f"{wname}: manifest shape {tensors[wname].shape} does not match spec {layer.weight_shape()}"
            )
        bias = None
        if layer.bias:
            bname = f"{layer.id}.bias"
            if bname not in tensors:
                raise CheckpointError(f"missing tensor {bname}")
            bias = tensors[bname]
        weights[layer.id] = KernelTensor(tensors[wname], bias)

    scaling = None
    scaling_path = root / SCALING_FILE
    if scaling_path.exists():
        meta = json.loads(scaling_path.read_text(encoding="utf-8"))
        factors = {}
        for site in meta["sites"]:
            gname = f"{site}.gamma"
            if gname not in tensors:
                raise CheckpointError(f"missing tensor {gname}")
            factors[site] = tensors[gname].copy()
        scaling = ScalingState.from_meta(meta, factors)
    return spec, weights, scaling


def weights_equal(a: dict[str, KernelTensor], b: dict[str, KernelTensor]) -> bool:
    if a.keys() != b.keys():
        return False
    for k in a:
        if not np.array_equal(a[k].data, b[k].data):
            return False
        if (a[k].bias is None) != (b[k].bias is None):
            return False
        if a[k].bias is not None and not np.array_equal(a[k].bias, b[k].bias):
            return False
    return True
