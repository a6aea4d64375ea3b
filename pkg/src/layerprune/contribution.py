"""Layer contribution as CLS cosine similarity between a layer's input and output."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderModel, forward
from .strategies import DropPlan, PlanError, select_by_threshold

DEFAULT_THRESHOLDS = (0.95, 0.925, 0.9)


@dataclass(frozen=True)
class SimilarityProfile:
    mean_similarity: tuple[float, ...]
    n_examples: int

    def __post_init__(self):
        object.__setattr__(self, "mean_similarity", tuple(float(s) for s in self.mean_similarity))
        if not self.mean_similarity:
            raise ValueError("profile must cover at least one layer")
        if self.n_examples < 1:
            raise ValueError("profile needs at least one example")
        if any(not -1.0 <= s <= 1.0 for s in self.mean_similarity):
            raise ValueError("similarities must lie in [-1, 1]")

    @property
    def num_layers(self) -> int:
        return len(self.mean_similarity)

    def to_dict(self, thresholds=DEFAULT_THRESHOLDS) -> dict:
        plans = {f"{t:g}": select_by_threshold(self, t) for t in thresholds}
        return {
            "num_layers": self.num_layers,
            "n_examples": self.n_examples,
            "mean_similarity": list(self.mean_similarity),
            "layers": [
                {
                    "layer": i,
                    "mean_similarity": s,
                    "dropped_at": {key: i in plan.dropped for key, plan in plans.items()},
                }
                for i, s in enumerate(self.mean_similarity, start=1)
            ],
            "plans": {key: sorted(plan.dropped) for key, plan in plans.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityProfile":
        return cls(tuple(d["mean_similarity"]), int(d["n_examples"]))


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.size} vs {v.size}")
    uu, vv = float(u @ u), float(v @ v)
    if uu == 0.0 or vv == 0.0:
        raise ValueError("cosine undefined for a zero-norm vector")
    # sqrt(uu * vv) rather than |u||v|: gives exactly 1.0 when u == v
    c = float(u @ v) / math.sqrt(uu * vv)
    return min(1.0, max(-1.0, c))


def _rowwise_cosine(a, b):
    return [cosine(x, y) for x, y in zip(a, b)]


def similarity_profile(model: EncoderModel, data) -> SimilarityProfile:
    """Average, over every example in ``data``, the cosine between the CLS
    state entering each layer and the CLS state leaving it.

    Means are exactly rounded sums (``math.fsum``), so the result does not
    depend on example order or batching.
    """
    data = list(data)
    if not data or sum(len(b) for b in data) == 0:
        raise ValueError("empty dataset")
    L = model.config.num_layers
    per_layer = [[] for _ in range(L)]
    for batch in data:
        _, taps = forward(model, batch)
        states = [np.asarray(t, dtype=np.float64) for t in taps.cls_states]
        for i in range(L):
            per_layer[i].extend(_rowwise_cosine(states[i], states[i + 1]))
    n = len(per_layer[0])
    means = [min(1.0, max(-1.0, math.fsum(s) / n)) for s in per_layer]
    return SimilarityProfile(tuple(means), n)


def score_and_plan(model: EncoderModel, data, tau: float) -> tuple[SimilarityProfile, DropPlan]:
    profile = similarity_profile(model, data)
    plan = select_by_threshold(profile, tau)
    if not plan.kept:
        raise PlanError(f"threshold {tau} selects every layer; the encoder would be empty")
    return profile, plan
