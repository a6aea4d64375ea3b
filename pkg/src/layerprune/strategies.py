"""Drop plans for the positional and contribution-based layer-dropping strategies.

All layer indices here are 1-based: layer 1 sits directly above the
embedding block and layer L is the topmost encoder layer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class PlanError(ValueError):
    pass


class Strategy(str, enum.Enum):
    TOP = "top"
    BOTTOM = "bottom"
    ODD_ALTERNATE = "odd-alternate"
    EVEN_ALTERNATE = "even-alternate"
    SYMMETRIC = "symmetric"
    CONTRIBUTION = "contribution"
    CUSTOM = "custom"


@dataclass(frozen=True)
class DropPlan:
    strategy: Strategy
    num_layers: int
    dropped: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "dropped", frozenset(int(i) for i in self.dropped))
        if self.num_layers < 1:
            raise PlanError(f"num_layers must be positive, got {self.num_layers}")
        bad = sorted(i for i in self.dropped if not 1 <= i <= self.num_layers)
        if bad:
            raise PlanError(f"layer indices {bad} outside 1..{self.num_layers}")

    @property
    def kept(self) -> list[int]:
        return [i for i in range(1, self.num_layers + 1) if i not in self.dropped]

    @property
    def k(self) -> int:
        return len(self.dropped)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "num_layers": self.num_layers,
            "dropped": sorted(self.dropped),
            "kept": self.kept,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DropPlan":
        plan = cls(Strategy(d["strategy"]), int(d["num_layers"]), frozenset(d["dropped"]))
        if "kept" in d and list(d["kept"]) != plan.kept:
            raise PlanError("plan 'kept' list disagrees with 'dropped'")
        return plan


def _check_k(L: int, K: int, upper: int):
    if L < 1:
        raise PlanError(f"L must be positive, got {L}")
    if not 0 <= K <= upper:
        raise PlanError(f"K={K} out of range 0..{upper} for L={L}")


def plan_top(L: int, K: int) -> DropPlan:
    _check_k(L, K, L - 1)
    return DropPlan(Strategy.TOP, L, frozenset(range(L - K + 1, L + 1)))


def plan_bottom(L: int, K: int) -> DropPlan:
    """Drop layers 1..K; the embedding output then feeds layer K+1."""
    _check_k(L, K, L - 1)
    return DropPlan(Strategy.BOTTOM, L, frozenset(range(1, K + 1)))


def _alternate(L, K, offset, strategy):
    if L % 2:
        raise PlanError(f"alternate dropping needs an even layer count, got L={L}")
    _check_k(L, K, L // 2)
    return DropPlan(strategy, L, frozenset(L - offset - 2 * i for i in range(K)))


def plan_even_alternate(L: int, K: int) -> DropPlan:
    """Every other layer from the top, starting at L (12, 4 -> {6, 8, 10, 12})."""
    return _alternate(L, K, 0, Strategy.EVEN_ALTERNATE)


def plan_odd_alternate(L: int, K: int) -> DropPlan:
    """Every other layer from the top, starting at L-1 (12, 4 -> {5, 7, 9, 11})."""
    return _alternate(L, K, 1, Strategy.ODD_ALTERNATE)


def plan_symmetric(L: int, K: int) -> DropPlan:
    """Keep X = (L-K)/2 layers at each end and drop the K in the middle."""
    _check_k(L, K, L - 1)
    if (L - K) % 2:
        raise PlanError(f"asymmetric remainder: L-K={L - K} is odd, cannot keep equal top and bottom margins")
    x = (L - K) // 2
    return DropPlan(Strategy.SYMMETRIC, L, frozenset(range(x + 1, x + K + 1)))


POSITIONAL = {
    Strategy.TOP: plan_top,
    Strategy.BOTTOM: plan_bottom,
    Strategy.ODD_ALTERNATE: plan_odd_alternate,
    Strategy.EVEN_ALTERNATE: plan_even_alternate,
    Strategy.SYMMETRIC: plan_symmetric,
}


def make_plan(strategy, L: int, K: int) -> DropPlan:
    strategy = Strategy(strategy)
    if strategy not in POSITIONAL:
        raise PlanError(f"{strategy.value!r} is not a positional strategy")
    return POSITIONAL[strategy](L, K)


def select_by_threshold(profile, tau: float) -> DropPlan:
    """Drop every layer whose mean CLS similarity is strictly above ``tau``.

    ``profile`` is a SimilarityProfile or a plain sequence of per-layer means.
    """
    sims = list(getattr(profile, "mean_similarity", profile))
    if not sims:
        raise PlanError("empty similarity profile")
    if not 0.0 <= tau <= 1.0:
        raise PlanError(f"threshold must lie in [0, 1], got {tau}")
    return DropPlan(
        Strategy.CONTRIBUTION,
        len(sims),
        frozenset(i for i, s in enumerate(sims, start=1) if s > tau),
    )
