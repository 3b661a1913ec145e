"""Batch estimators: TD, every-visit Monte Carlo, and the subgraph bootstrap.

All three consume the pooled dataset (every suffix of every trajectory).
TD solves the empirical Bellman fixed point over the visited states; MC
averages suffix reward sums from each visit (inclusive of the visit's own
reward); the subgraph estimator bootstraps for next-states inside G and
substitutes observed rollouts for exits, solving

    (I - P_hat_G) v = r_hat_G + V_hat_out.

Unvisited conditional expectations are zero (the 0/0 convention); states
of G with no visits are dropped from the system, reported as warnings, and
given value 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import FixedPointNotContractive
from .mrp_core import TERMINAL
from .sampling import Dataset

_DENSE_SOLVE_LIMIT = 2048
_NEUMANN_TOL = 1e-12

#: Marker for the reward-timing convention: the value at a state includes
#: the reward collected at that state.
CONVENTION = "include-current-reward"


@dataclass
class EstimateResult:
    """A value-function estimate plus diagnostics.

    ``values`` maps visited states to estimates; :meth:`value` returns 0.0
    for anything unvisited (and such states are absent from ``covered``).
    """

    values: dict
    covered: frozenset
    solver_info: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    convention: str = CONVENTION

    def value(self, s: int) -> float:
        return self.values.get(int(s), 0.0)

    def as_vector(self, states: Sequence[int]) -> np.ndarray:
        return np.array([self.value(s) for s in states])

    def to_json(self) -> dict:
        return {
            "values": {str(k): v for k, v in sorted(self.values.items())},
            "covered": sorted(self.covered),
            "solver_info": self.solver_info,
            "warnings": list(self.warnings),
            "convention": self.convention,
        }


# ---------------------------------------------------------------------------
# Shared fixed-point solver
# ---------------------------------------------------------------------------


def solve_empirical_fixed_point(P_hat, b, tol: float = 1e-10,
                                neumann_cap: int = 100_000) -> tuple[np.ndarray, dict]:
    """Solve ``v = P_hat v + b`` for a row-substochastic empirical kernel.

    Direct LU (dense or sparse) first; on failure, Neumann iteration
    ``v <- P_hat v + b`` up to the cap. Returns the solution and solver
    info with the achieved residual.
    """
    from scipy import sparse

    is_sparse = sparse.issparse(P_hat)
    n = P_hat.shape[0]
    if n == 0:
        return np.empty(0), {"method": "empty", "residual": 0.0, "neumann_steps": 0}
    b = np.asarray(b, dtype=float)
    row_sums = np.asarray(P_hat.sum(axis=1)).ravel()
    if row_sums.max(initial=0.0) > 1.0 + 1e-9:
        raise ValueError("P_hat is not row-substochastic")

    def residual_of(v):
        return float(np.max(np.abs(v - (P_hat @ v) - b)))

    try:
        if is_sparse:
            from scipy.sparse.linalg import spsolve

            A = sparse.identity(n, format="csc") - P_hat.tocsc()
            v = spsolve(A, b)
        elif n <= _DENSE_SOLVE_LIMIT:
            v = np.linalg.solve(np.eye(n) - P_hat, b)
        else:
            from scipy.sparse.linalg import spsolve

            A = sparse.identity(n, format="csc") - sparse.csc_matrix(P_hat)
            v = spsolve(A, b)
        if np.all(np.isfinite(v)):
            res = residual_of(v)
            if res <= max(tol, 1e-8 * (1.0 + np.abs(v).max())):
                return v, {"method": "direct", "residual": res, "neumann_steps": 0}
    except Exception:
        pass

    # Neumann fallback: empirical kernels can be near-singular transiently
    v = b.copy()
    term = b.copy()
    for k in range(1, neumann_cap + 1):
        term = P_hat @ term
        v = v + term
        tnorm = float(np.max(np.abs(term)))
        if tnorm <= _NEUMANN_TOL * max(1.0, float(np.abs(v).max())):
            return v, {"method": "neumann", "residual": residual_of(v), "neumann_steps": k}
    raise FixedPointNotContractive(
        f"no Neumann decay within {neumann_cap} steps (insufficient data?)")


# ---------------------------------------------------------------------------
# Pooled counts
# ---------------------------------------------------------------------------


def _pooled_arrays(dataset: Dataset):
    d = dataset.derived()
    return dataset.states, d["next_state"], dataset.rewards, d["suffix_incl"], d["suffix_excl"]


def _fixed_point_estimate(dataset: Dataset, subset: Optional[np.ndarray],
                          discount: Optional[float] = None) -> EstimateResult:
    """Shared TD / subgraph path.

    ``subset=None`` means "all visited states" (plain TD). Otherwise the
    fixed point runs on the visited members of the subset, with exits
    contributing their observed rollouts.

    With ``discount`` set, the known continuation probability replaces the
    empirical one: ``P_hat = discount * (transition counts / non-terminal
    transition counts)`` per row, and rollout terms are dropped. This is
    *not* the same estimator at finite sample: it trusts the terminal rate
    instead of measuring it.
    """
    from scipy import sparse

    sf, ns, rf, _, suf_ex = _pooled_arrays(dataset)
    warnings: list = []
    if subset is None:
        index = np.unique(sf)
    else:
        index = np.asarray(sorted(set(int(s) for s in subset)), dtype=np.int64)
        visited = np.unique(sf)
        missing = np.setdiff1d(index, visited)
        if len(missing):
            warnings.extend(f"no visits to subgraph state {int(s)}; value set to 0"
                            for s in missing)
            index = np.setdiff1d(index, missing)
    k = len(index)
    if k == 0:
        return EstimateResult(values={}, covered=frozenset(), warnings=warnings,
                              solver_info={"method": "empty", "residual": 0.0,
                                           "neumann_steps": 0})

    on = np.isin(sf, index) if subset is not None else np.ones(len(sf), dtype=bool)
    pos = np.searchsorted(index, sf[on])
    N = np.bincount(pos, minlength=k).astype(float)
    r_hat = np.bincount(pos, weights=rf[on], minlength=k) / N

    ns_on = ns[on]
    next_in = (ns_on != TERMINAL) & np.isin(ns_on, index)
    rows = pos[next_in]
    cols = np.searchsorted(index, ns_on[next_in])
    if discount is None:
        denom = N
    else:
        # conditional on continuation; 0/0 rows stay zero
        n_cont = np.bincount(pos[ns_on != TERMINAL], minlength=k).astype(float)
        denom = np.where(n_cont > 0, n_cont / discount, np.inf)
    if k <= _DENSE_SOLVE_LIMIT:
        M = np.zeros((k, k))
        np.add.at(M, (rows, cols), 1.0)
        P_hat = M / denom[:, None]
    else:
        M = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(k, k)).tocsr()
        P_hat = sparse.diags(1.0 / denom) @ M

    if discount is None:
        v_out = np.bincount(pos[~next_in], weights=suf_ex[on][~next_in], minlength=k) / N
        b = r_hat + v_out
    else:
        b = r_hat
    v, info = solve_empirical_fixed_point(P_hat, b)
    values = {int(s): float(x) for s, x in zip(index, v)}
    return EstimateResult(values=values, covered=frozenset(int(s) for s in index),
                          solver_info=info, warnings=warnings)


# ---------------------------------------------------------------------------
# Public estimators
# ---------------------------------------------------------------------------


def td_estimate(dataset: Dataset, discount: Optional[float] = None) -> EstimateResult:
    """Solve the empirical Bellman fixed point over all visited states.

    By default the terminal rate is estimated along with everything else
    (absorbing form). Passing the known continuation probability as
    ``discount`` switches to the variant that bootstraps conditionally on
    non-termination, scaled by ``discount``; the two agree in population
    but differ at finite sample.
    """
    if discount is not None and not 0.0 < discount < 1.0:
        raise ValueError("discount must lie in (0, 1)")
    return _fixed_point_estimate(dataset, subset=None, discount=discount)


def mc_estimate(dataset: Dataset, states: Optional[Sequence[int]] = None) -> EstimateResult:
    """Every-visit Monte Carlo: average suffix reward sums per state.

    The rollout at a visit includes that visit's reward. With ``states``
    given, only those states are reported (unvisited ones are flagged).
    """
    sf, _, _, suf_in, _ = _pooled_arrays(dataset)
    index = np.unique(sf)
    warnings: list = []
    if states is not None:
        wanted = np.asarray(sorted(set(int(s) for s in states)), dtype=np.int64)
        missing = np.setdiff1d(wanted, index)
        warnings.extend(f"no visits to state {int(s)}; value set to 0" for s in missing)
        index = np.intersect1d(wanted, index)
    k = len(index)
    if k == 0:
        return EstimateResult(values={}, covered=frozenset(), warnings=warnings,
                              solver_info={"method": "average"})
    on = np.isin(sf, index)
    pos = np.searchsorted(index, sf[on])
    N = np.bincount(pos, minlength=k).astype(float)
    means = np.bincount(pos, weights=suf_in[on], minlength=k) / N
    values = {int(s): float(m) for s, m in zip(index, means)}
    return EstimateResult(values=values, covered=frozenset(int(s) for s in index),
                          solver_info={"method": "average"}, warnings=warnings)


def subgraph_estimate(dataset: Dataset, G) -> EstimateResult:
    """Solve the empirical subgraph fixed point on G.

    Bootstraps across transitions staying inside G; transitions leaving G
    (including termination) contribute the observed remaining rollout.
    ``G = all visited states`` reduces to :func:`td_estimate` bitwise; a
    never-revisited singleton reduces to its MC average.
    """
    members = list(G.members) if hasattr(G, "members") else list(G)
    if not members:
        raise ValueError("subgraph must be nonempty")
    return _fixed_point_estimate(dataset, subset=np.asarray(members, dtype=np.int64))
