"""Greedy data-driven construction of the bootstrap subgraph.

Starting from the target state alone, each round evaluates the estimated
variance of every one-state extension drawn from a candidate set (states
whose estimated occupancy clears an ``h^3 log^4(n) / n`` cut), accepts the
best extension only on strict improvement, and stops otherwise. The
variance functional is injected, so the search runs identically against
the exact oracle or the data-driven multi-stage estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ZeroVisits
from .rootsa import _estimate_h_from_lengths
from .sampling import Dataset


@dataclass
class SelectionTrace:
    candidate_set: tuple
    rounds: list = field(default_factory=list)  # dicts per evaluation round
    stop_reason: str = ""
    evaluations: int = 0

    def accepted_variances(self) -> list:
        return [r["variance_after"] for r in self.rounds if r["accepted"]]

    def to_json(self) -> dict:
        return {
            "candidate_set": list(self.candidate_set),
            "rounds": self.rounds,
            "stop_reason": self.stop_reason,
            "evaluations": self.evaluations,
        }


def candidate_set(holdout_dataset: Dataset, n: int, c1: float = 1.0,
                  h: Optional[float] = None) -> set:
    """States whose holdout occupancy estimate clears the selection cut.

    Threshold: ``c1 * h^3 * log(n)^4 / n``. ``c1`` stands in for an
    unspecified universal constant (default 1); ``h`` defaults to the
    holdout's empirical horizon estimate.
    """
    if h is None:
        h = _estimate_h_from_lengths(holdout_dataset.lengths())
    threshold = c1 * h ** 3 * math.log(max(n, 2)) ** 4 / max(n, 1)
    sf = holdout_dataset.states
    if len(sf) == 0:
        return set()
    index, counts = np.unique(sf, return_counts=True)
    nu_hat = counts / holdout_dataset.n
    return {int(s) for s, v in zip(index, nu_hat) if v >= threshold}


def greedy_select(holdout_dataset: Dataset, s0: int, n: int,
                  variance_fn: Callable[[tuple], float],
                  budget: Optional[int] = None, c1: float = 1.0,
                  h: Optional[float] = None,
                  candidates: Optional[Sequence[int]] = None):
    """Greedy forward selection of the subgraph minimizing variance at s0.

    ``variance_fn(members)`` maps a sorted member tuple to the estimated
    sandwiched variance at ``s0``. Evaluations are cached by member tuple;
    ties break toward the lowest state id. Returns ``(Subgraph, trace)``;
    if the evaluation budget runs out the best subgraph so far is returned
    with ``stop_reason = "budget_exceeded"``.
    """
    from .covariance import Subgraph

    s0 = int(s0)
    sf = holdout_dataset.states
    if s0 not in set(int(s) for s in np.unique(sf)):
        raise ZeroVisits([s0])
    if candidates is None:
        cand = candidate_set(holdout_dataset, n, c1=c1, h=h)
    else:
        cand = {int(s) for s in candidates}
    cand.discard(s0)
    trace = SelectionTrace(candidate_set=tuple(sorted(cand)))
    cache: dict = {}

    def evaluate(members: tuple) -> float:
        if members not in cache:
            if budget is not None and trace.evaluations >= budget:
                raise _BudgetUp()
            trace.evaluations += 1
            cache[members] = float(variance_fn(members))
        return cache[members]

    current = (s0,)
    try:
        current_var = evaluate(current)
        while True:
            remaining = sorted(cand - set(current))
            if not remaining:
                trace.stop_reason = "candidates_exhausted"
                break
            best_s, best_var = None, None
            for s in remaining:  # ascending: ties keep the lowest id
                members = tuple(sorted(current + (s,)))
                v = evaluate(members)
                if best_var is None or v < best_var:
                    best_s, best_var = s, v
            # fresh value for the incumbent each round
            current_var = evaluate(current)
            if best_var is not None and best_var < current_var:
                current = tuple(sorted(current + (best_s,)))
                trace.rounds.append({
                    "chosen": int(best_s), "accepted": True,
                    "variance_before": current_var, "variance_after": best_var,
                })
                current_var = best_var
            else:
                trace.rounds.append({
                    "chosen": int(best_s) if best_s is not None else None,
                    "accepted": False,
                    "variance_before": current_var,
                    "variance_after": best_var,
                })
                trace.stop_reason = "no_improvement"
                break
    except _BudgetUp:
        trace.stop_reason = "budget_exceeded"
    return Subgraph(current), trace


class _BudgetUp(Exception):
    pass


def exact_variance_fn(mrp, s0: int) -> Callable[[tuple], float]:
    """Oracle variance functional from the exact covariance solver."""
    from .covariance import sigma_subgraph

    def fn(members: tuple) -> float:
        report = sigma_subgraph(mrp, members, check=False)
        return report.variance_at(s0)

    return fn


def multistage_variance_fn(dataset: Dataset, s0: int, config=None) -> Callable[[tuple], float]:
    """Data-driven variance functional from the multi-stage estimator."""
    from .variance_estimation import variance_estimate

    def fn(members: tuple) -> float:
        return variance_estimate(dataset, members, s0, config).value

    return fn
