"""L1-norm importance scores for prunable units and unimportant-set selection.

Three unit kinds exist: output filters of a conv, input channels at a
gather/read site (the trunk channels a block or entry conv consumes), and
four-filter groups of the convs feeding a 2x pixel shuffle. Scores are the
raw absolute weight sums of the covered slice, biases excluded; selection
sorts them globally or per site under a min/max/rand policy with a
keep-at-least-one floor per site.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphir import IMAGE_CHANNELS, NetworkSpec, require_valid
from .tensorcore import KernelTensor

OUTPUT_FILTER = "output_filter"
INPUT_CHANNEL = "input_channel"
SHUFFLE_GROUP = "shuffle_group"

POLICIES = tuple(f"{c}-{s}" for c in ("min", "max", "rand") for s in ("global", "local"))


class SelectionError(ValueError):
    """Invalid ratio, policy, or unit inventory."""


@dataclass(frozen=True)
class PrunableUnit:
    layer_id: str
    kind: str  # OUTPUT_FILTER | INPUT_CHANNEL | SHUFFLE_GROUP
    index: int
    element_count: int

    @property
    def site(self) -> str:
        return f"{self.layer_id}:{_SITE_SUFFIX[self.kind]}"

    @property
    def sort_key(self) -> tuple[str, str, int]:
        return (self.layer_id, self.kind, self.index)


_SITE_SUFFIX = {OUTPUT_FILTER: "out", INPUT_CHANNEL: "in", SHUFFLE_GROUP: "group"}


@dataclass(frozen=True)
class Score:
    unit: PrunableUnit
    value: float


@dataclass
class PruningPlan:
    """The selected unimportant set plus derived per-site kept indices."""

    ratio: float
    policy: str
    seed: int | None
    pruned: dict[str, list[int]]  # site -> pruned unit indices (sorted)
    kept: dict[str, list[int]]  # site -> kept unit indices (sorted)
    site_counts: dict[str, int] = field(default_factory=dict)

    @property
    def total_pruned(self) -> int:
        return sum(len(v) for v in self.pruned.values())

    def is_empty(self) -> bool:
        return self.total_pruned == 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "ratio": self.ratio,
                "policy": self.policy,
                "seed": self.seed,
                "site_counts": self.site_counts,
                "pruned": self.pruned,
                "kept": self.kept,
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "PruningPlan":
        d = json.loads(text)
        return cls(
            ratio=d["ratio"],
            policy=d["policy"],
            seed=d["seed"],
            pruned={k: list(v) for k, v in d["pruned"].items()},
            kept={k: list(v) for k, v in d["kept"].items()},
            site_counts={k: int(v) for k, v in d.get("site_counts", {}).items()},
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PruningPlan":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# unit scores


def score_output_filter(kernel: KernelTensor, k: int) -> float:
    """Absolute weight sum of filter k (the C_in x K_h x K_w slice), bias excluded."""
    if not 0 <= k < kernel.out_channels:
        raise IndexError(f"filter index {k} out of range [0, {kernel.out_channels})")
    return float(np.abs(kernel.data[k].astype(np.float64)).sum())


def score_input_channel(kernel: KernelTensor, k: int) -> float:
    """Absolute weight sum of input channel k (the C_out x K_h x K_w slice)."""
    if not 0 <= k < kernel.in_channels:
        raise IndexError(f"input channel index {k} out of range [0, {kernel.in_channels})")
    return float(np.abs(kernel.data[:, k].astype(np.float64)).sum())


def score_shuffle_group(kernel: KernelTensor, k: int) -> float:
    """Absolute weight sum of the four consecutive filters 4k..4k+3."""
    if kernel.out_channels % 4 != 0:
        raise ValueError(f"out_channels {kernel.out_channels} not divisible by 4")
    if not 0 <= k < kernel.out_channels // 4:
        raise IndexError(f"group index {k} out of range [0, {kernel.out_channels // 4})")
    return float(np.abs(kernel.data[4 * k : 4 * (k + 1)].astype(np.float64)).sum())


def collect_units(spec: NetworkSpec) -> list[PrunableUnit]:
    """Enumerate every prunable unit of an unpruned spec in a deterministic order."""
    require_valid(spec)
    units: list[PrunableUnit] = []
    for layer, _ in spec.conv_layers():
        _, cin, kh, kw = layer.weight_shape()
        if layer.prune_in:
            # hidden-state read channels; image channels of entry convs excluded
            hidden = layer.in_channels - (IMAGE_CHANNELS if _is_entry(spec, layer.id) else 0)
            for k in range(hidden):
                units.append(PrunableUnit(layer.id, INPUT_CHANNEL, k, layer.out_channels * kh * kw))
        if layer.prune_out:
            for k in range(layer.out_channels):
                units.append(PrunableUnit(layer.id, OUTPUT_FILTER, k, cin * kh * kw))
        if layer.prune_groups:
            for k in range(layer.out_channels // 4):
                units.append(PrunableUnit(layer.id, SHUFFLE_GROUP, k, 4 * cin * kh * kw))
    return units


def _is_entry(spec: NetworkSpec, layer_id: str) -> bool:
    return any(cell.entry.id == layer_id for cell in spec.cells())


def score_units(
    spec: NetworkSpec,
    weights: dict[str, KernelTensor],
    per_weight: bool = False,
) -> list[Score]:
    """Score every prunable unit; ``per_weight`` divides by covered element count."""
    scores: list[Score] = []
    for unit in collect_units(spec):
        kernel = weights[unit.layer_id]
        if unit.kind == OUTPUT_FILTER:
            v = score_output_filter(kernel, unit.index)
        elif unit.kind == INPUT_CHANNEL:
            offset = IMAGE_CHANNELS if _is_entry(spec, unit.layer_id) else 0
            v = score_input_channel(kernel, unit.index + offset)
        else:
            v = score_shuffle_group(kernel, unit.index)
        if per_weight:
            v /= unit.element_count
        scores.append(Score(unit, v))
    return scores


# ---------------------------------------------------------------------------
# selection


def select(scores: list[Score], ratio: float, policy: str, seed: int | None = None) -> PruningPlan:
    """Choose the unimportant set at the given ratio under a selection policy.

    Global scopes sort all units together and walk the candidate order
    greedily; a site whose last unit would be taken is exempted and the next
    candidate takes its place. Local scopes prune floor(n_site * ratio) per
    site. Ties break on (layer_id, kind, index) ascending.
    """
    if not 0 <= ratio < 1:
        raise SelectionError(f"ratio must be in [0, 1), got {ratio}")
    if policy not in POLICIES:
        raise SelectionError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    units = [s.unit for s in scores]
    if len(set(units)) != len(units):
        raise SelectionError("duplicate prunable units in score list")
    criterion, scope = policy.split("-")
    if criterion == "rand" and seed is None:
        raise SelectionError("rand policy needs a seed")

    site_counts: dict[str, int] = {}
    for u in units:
        site_counts[u.site] = site_counts.get(u.site, 0) + 1

    def ordered(subset: list[Score]) -> list[Score]:
        if criterion == "rand":
            rng = np.random.default_rng(seed)
            perm = rng.permutation(len(subset))
            return [subset[i] for i in perm]
        reverse = criterion == "max"
        return sorted(
            subset,
            key=lambda s: ((-s.value if reverse else s.value),) + s.unit.sort_key,
        )

    pruned: dict[str, list[int]] = {site: [] for site in site_counts}
    if scope == "global":
        target = int(len(units) * ratio)
        kept_left = dict(site_counts)
        taken = 0
        for s in ordered(scores):
            if taken >= target:
                break
            site = s.unit.site
            if kept_left[site] <= 1:
                continue  # exempt the would-be-last unit of this site
            pruned[site].append(s.unit.index)
            kept_left[site] -= 1
            taken += 1
    else:
        by_site: dict[str, list[Score]] = {site: [] for site in site_counts}
        for s in scores:
            by_site[s.unit.site].append(s)
        for site in by_site:
            n_prune = int(len(by_site[site]) * ratio)
            for s in ordered(by_site[site])[:n_prune]:
                pruned[site].append(s.unit.index)

    kept: dict[str, list[int]] = {}
    by_site_idx: dict[str, list[int]] = {site: [] for site in site_counts}
    for u in units:
        by_site_idx[u.site].append(u.index)
    for site, idxs in by_site_idx.items():
        dead = set(pruned[site])
        pruned[site] = sorted(dead)
        kept[site] = sorted(i for i in idxs if i not in dead)
        assert kept[site], f"selection emptied site {site}"
    return PruningPlan(
        ratio=ratio,
        policy=policy,
        seed=seed if criterion == "rand" else None,
        pruned=pruned,
        kept=kept,
        site_counts=site_counts,
    )


def plan_for(
    spec: NetworkSpec,
    weights: dict[str, KernelTensor],
    ratio: float,
    policy: str = "min-global",
    seed: int | None = None,
    per_weight: bool = False,
) -> PruningPlan:
    return select(score_units(spec, weights, per_weight=per_weight), ratio, policy, seed=seed)
