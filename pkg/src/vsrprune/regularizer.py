"""Scaling-factor lifecycle: injection, sparsity penalty, and the ramp schedule.

Every prunable unit owns one scaling factor. Factors start at one, so the
instrumented network reproduces the plain network exactly; factors marked
unimportant by a pruning plan receive a squared-L2 penalty whose weight
ramps up by ``delta`` every ``t1`` iterations until it reaches ``tau``,
then holds for ``t2`` iterations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .graphir import NetworkSpec, IMAGE_CHANNELS
from .scoring import PruningPlan, collect_units
from .tensorcore import Scalar, masked_sq_sum

PHASE_RAMPING = "ramping"
PHASE_HOLDING = "holding"
PHASE_DONE = "done"


class SiteCollisionError(ValueError):
    """Two scaling vectors were attached to the same site."""


@dataclass
class ScalingState:
    """All per-site scaling vectors plus the penalty schedule position."""

    factors: dict[str, np.ndarray]
    unimportant: dict[str, list[int]] = field(default_factory=dict)
    delta: float = 1e-4
    tau: float = 0.1
    t1: int = 5
    t2: int = 3375
    iteration: int = 0
    reached_at: int | None = None

    @property
    def alpha(self) -> float:
        """Current penalty weight, recomputed exactly from the iteration count."""
        if self.t1 <= 0:
            return self.tau
        return min(self.tau, self.delta * (self.iteration // self.t1))

    @property
    def phase(self) -> str:
        if self.reached_at is None:
            return PHASE_RAMPING
        if self.iteration - self.reached_at >= self.t2:
            return PHASE_DONE
        return PHASE_HOLDING

    def sites(self) -> list[str]:
        return sorted(self.factors)

    def pruned_indices(self, site: str) -> list[int]:
        return self.unimportant.get(site, [])

    def kept_indices(self, site: str) -> list[int]:
        dead = set(self.pruned_indices(site))
        return [i for i in range(self.factors[site].size) if i not in dead]

    def meta_dict(self) -> dict:
        return {
            "sites": self.sites(),
            "unimportant": {k: list(v) for k, v in self.unimportant.items()},
            "delta": self.delta,
            "tau": self.tau,
            "t1": self.t1,
            "t2": self.t2,
            "iteration": self.iteration,
            "reached_at": self.reached_at,
        }

    @classmethod
    def from_meta(cls, meta: dict, factors: dict[str, np.ndarray]) -> "ScalingState":
        return cls(
            factors=factors,
            unimportant={k: list(v) for k, v in meta.get("unimportant", {}).items()},
            delta=meta["delta"],
            tau=meta["tau"],
            t1=meta["t1"],
            t2=meta["t2"],
            iteration=meta["iteration"],
            reached_at=meta["reached_at"],
        )


def inject_scaling(
    spec: NetworkSpec,
    delta: float = 1e-4,
    tau: float = 0.1,
    t1: int = 5,
    t2: int = 3375,
) -> ScalingState:
    """Attach an all-ones scaling vector to every prunable site of the spec.

    Read-site factors multiply the gathered input channels before a conv;
    mid/write-site factors multiply conv output channels after the bias;
    shuffle-site factors multiply each four-filter group's output. With all
    factors at one the instrumented network's outputs equal the plain
    network's bitwise.
    """
    counts: dict[str, int] = {}
    for unit in collect_units(spec):
        counts[unit.site] = counts.get(unit.site, 0) + 1
    factors: dict[str, np.ndarray] = {}
    for site, n in counts.items():
        if site in factors:
            raise SiteCollisionError(f"scaling vector already attached to {site}")
        factors[site] = np.ones(n, dtype=np.float32)
    return ScalingState(factors=factors, delta=delta, tau=tau, t1=t1, t2=t2)


def mark_unimportant(state: ScalingState, plan: PruningPlan) -> None:
    """Point the penalty at the plan's pruned units."""
    for site, idx in plan.pruned.items():
        if site not in state.factors:
            raise KeyError(f"plan site {site} has no scaling vector")
        if idx and max(idx) >= state.factors[site].size:
            raise IndexError(f"plan index out of range for site {site}")
    state.unimportant = {site: list(idx) for site, idx in plan.pruned.items() if idx}


def sparsity_penalty(state: ScalingState) -> Scalar:
    """alpha * sum of squared unimportant factors; kept factors contribute nothing."""
    total = Scalar(0.0)
    alpha = state.alpha
    for site in state.sites():
        idx = state.pruned_indices(site)
        if idx:
            total = total + masked_sq_sum(state.factors[site], idx) * alpha
    return total


def step_schedule(state: ScalingState) -> ScalingState:
    """Advance one iteration: ramp alpha every t1 steps, then hold t2 steps."""
    state.iteration += 1
    if state.reached_at is None and state.alpha >= state.tau:
        state.reached_at = state.iteration
    return state


def decay_unimportant(state: ScalingState, rate: float) -> None:
    """One decoupled penalty step: gamma *= (1 - 2 * alpha * rate) on unimportant entries.

    Applying the exact penalty gradient multiplicatively (rather than through
    the adaptive data-loss optimizer) keeps pure-penalty dynamics monotone
    with a closed-form geometric decay.
    """
    factor = 1.0 - 2.0 * state.alpha * rate
    if factor < 0.0:
        factor = 0.0
    f32 = np.float32(factor)
    for site, idx in state.unimportant.items():
        if idx:
            state.factors[site][idx] *= f32


def trajectory_row(state: ScalingState) -> dict:
    """One observation of mean |gamma| split into pruned and kept populations."""
    pruned_vals: list[np.ndarray] = []
    kept_vals: list[np.ndarray] = []
    for site in state.sites():
        vec = np.abs(state.factors[site].astype(np.float64))
        dead = state.pruned_indices(site)
        mask = np.zeros(vec.size, dtype=bool)
        mask[dead] = True
        pruned_vals.append(vec[mask])
        kept_vals.append(vec[~mask])
    pruned_all = np.concatenate(pruned_vals) if pruned_vals else np.array([])
    kept_all = np.concatenate(kept_vals) if kept_vals else np.array([])
    return {
        "iter": state.iteration,
        "alpha": state.alpha,
        "mean_gamma_pruned": float(pruned_all.mean()) if pruned_all.size else 0.0,
        "mean_gamma_kept": float(kept_all.mean()) if kept_all.size else 0.0,
    }


class TrajectoryLog:
    """CSV log of the scaling-factor means: iter,alpha,mean_gamma_pruned,mean_gamma_kept."""

    FIELDS = ["iter", "alpha", "mean_gamma_pruned", "mean_gamma_kept"]

    def __init__(self, path) -> None:
        self.path = path
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._fh, fieldnames=self.FIELDS)
        self._writer.writeheader()

    def append(self, state: ScalingState) -> None:
        self._writer.writerow(trajectory_row(state))

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TrajectoryLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ---------------------------------------------------------------------------
# gamma lookup helpers used by the model evaluator


def entry_gamma_in(state: ScalingState | None, entry_id: str, trunk_width: int) -> np.ndarray | None:
    """Full input-scaling vector for an entry conv: ones over the image channels."""
    if state is None:
        return None
    vec = state.factors.get(f"{entry_id}:in")
    if vec is None:
        return None
    full = np.ones(IMAGE_CHANNELS + trunk_width, dtype=np.float32)
    full[IMAGE_CHANNELS:] = vec
    return full


def site_gamma(state: ScalingState | None, site: str) -> np.ndarray | None:
    if state is None:
        return None
    return state.factors.get(site)


def shuffle_gamma_expanded(state: ScalingState | None, layer_id: str) -> np.ndarray | None:
    """Per-filter vector repeating each group factor over its four filters."""
    if state is None:
        return None
    vec = state.factors.get(f"{layer_id}:group")
    if vec is None:
        return None
    return np.repeat(vec, 4)
