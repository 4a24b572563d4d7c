"""Structured filter pruning for recurrent video super-resolution networks.

The package trains a small recurrent SR network, learns per-unit scaling
factors under a ramped sparsity penalty, physically rewrites the network to
its kept units (full-width trunk preserved via gather/scatter residual
connections; pixel-shuffle convs pruned in aligned four-filter groups), and
finetunes the compiled result with a hidden-state alignment loss against
the unpruned teacher.
"""

from .graphir import NetworkSpec, make_network, instantiate, load_checkpoint, save_checkpoint, validate
from .pipeline import Model, StageConfig, run_stage
from .regularizer import ScalingState, inject_scaling, mark_unimportant, sparsity_penalty, step_schedule
from .rewrite import CostReport, RewriteResult, compile_plan, cost
from .scoring import PruningPlan, plan_for, score_units, select
from .tensorcore import KernelTensor, Tape, ValueTensor, grad_check
from .vsrmodel import HiddenTrace, Sequence, hidden_error_profile, run_network

__version__ = "0.1.0"

__all__ = [
    "CostReport",
    "HiddenTrace",
    "KernelTensor",
    "Model",
    "NetworkSpec",
    "PruningPlan",
    "RewriteResult",
    "ScalingState",
    "Sequence",
    "StageConfig",
    "Tape",
    "ValueTensor",
    "compile_plan",
    "cost",
    "grad_check",
    "hidden_error_profile",
    "inject_scaling",
    "instantiate",
    "load_checkpoint",
    "make_network",
    "mark_unimportant",
    "plan_for",
    "run_network",
    "run_stage",
    "save_checkpoint",
    "score_units",
    "select",
    "sparsity_penalty",
    "step_schedule",
    "validate",
]
