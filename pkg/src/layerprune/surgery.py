"""Checkpoint surgery: remove planned layers and renumber the survivors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .strategies import DropPlan, PlanError
from .tensorstore import Checkpoint
from .topology import ModelTopology, ParamReport


def apply_plan(c: Checkpoint, t: ModelTopology, plan: DropPlan) -> Checkpoint:
    """Return a new checkpoint without the planned layers.

    Surviving layers are compacted to indices ``0..L-K-1`` in their original
    order, so the result loads as an ordinary ``L-K`` layer model. Tensor
    buffers are shared, never modified.
    """
    if plan.num_layers != t.num_layers:
        raise PlanError(f"plan is for L={plan.num_layers} but checkpoint has {t.num_layers} layers")
    if len(plan.kept) == 0:
        raise PlanError("plan would leave zero encoder layers")

    tensors = {name: c.tensors[name] for name in t.embedding_tensors + t.other_tensors}
    for new_index, layer in enumerate(plan.kept):
        for name in t.layer_tensors[layer - 1]:
            tensors[t.scheme.rename_layer(name, new_index)] = c.tensors[name]
    return c.replace(tensors=tensors)


@dataclass(frozen=True)
class ReductionReport:
    params_before: int
    params_after: int
    layers_before: int
    layers_after: int

    @property
    def reduction_fraction(self) -> float:
        return 1.0 - self.params_after / self.params_before

    @property
    def est_finetune_speedup(self) -> float:
        # analytic: fine-tuning cost scales with encoder depth
        return self.layers_before / self.layers_after

    def to_dict(self) -> dict:
        return {
            "params_before": self.params_before,
            "params_after": self.params_after,
            "reduction_fraction": self.reduction_fraction,
            "layers_before": self.layers_before,
            "layers_after": self.layers_after,
            "est_finetune_speedup": self.est_finetune_speedup,
        }


def reduction_report(before: ParamReport, after: ParamReport, plan: DropPlan) -> ReductionReport:
    if len(before.per_layer) != plan.num_layers or len(after.per_layer) != len(plan.kept):
        raise PlanError("parameter reports do not match the plan's layer counts")
    return ReductionReport(before.total, after.total, plan.num_layers, len(plan.kept))


def max_droppable_within(
    scores: Mapping[int, float], full_score: float | None = None, threshold: float = 1.0
) -> int:
    """Largest K whose score is within ``threshold`` points of the full model.

    ``scores`` maps number of dropped layers to the task metric. Without an
    explicit ``full_score`` the K=0 entry is used. The threshold is in
    absolute metric points.
    """
    if not scores:
        raise ValueError("empty score map")
    scores = {int(k): float(v) for k, v in scores.items()}
    if full_score is None:
        if 0 not in scores:
            raise ValueError("scores need a K=0 entry when full_score is not given")
        full_score = scores[0]
    # scores are reported to two decimals; absorb float noise at the boundary
    ok = [k for k, s in scores.items() if full_score - s <= threshold + 1e-9]
    return max(ok, default=0)
