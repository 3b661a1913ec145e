"""Data-driven estimation of the subgraph estimator's asymptotic variance.

The multi-stage estimator splits the dataset into four disjoint quarters:

* Step I (quarter 1): a pilot value function via the online solver.
* Step II (quarters 2 and 3): independent multi-step within-G transition
  estimates ``P^(l)(s, s') = P_hat(S_l = s', S_1..S_l in G | S_0 = s)``
  for ``l = 1..L``, approximating the Neumann series of ``(I - P_G)^-1``.
* Step III (quarter 4): the residual covariance built from per-trajectory
  pooled residuals, normalized by that quarter's occupancy estimate.

The target value is assembled as the (s0, s0) entry of
``(I + sum_l P_hat^(l)) Sigma_hat (I + sum_l P_check^(l))^T``.

A single-split plug-in variant inverts the one-step empirical kernel
directly; it is flagged experimental.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InsufficientBudget, ZeroVisits
from .mrp_core import TERMINAL
from .rootsa import RootSaConfig, _estimate_h_from_lengths, root_sa_with_restarts
from .sampling import Dataset, in_set_run_lengths

_L_CAP = 4096


@dataclass
class VarianceEstimationConfig:
    L: Optional[int] = None
    h: Optional[float] = None
    root_sa: Optional[RootSaConfig] = None


@dataclass
class VarianceEstimate:
    """The assembled variance estimate plus its ingredients."""

    value: float
    L: int
    splits: tuple
    sigma_hat: np.ndarray
    p_hats: list
    p_checks: list
    states: tuple
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "L": self.L,
            "splits": [list(s) for s in self.splits],
            "states": list(self.states),
            "sigma_hat": self.sigma_hat.tolist(),
            "diagnostics": self.diagnostics,
        }


def _members_of(G) -> tuple:
    return tuple(G.members) if hasattr(G, "members") else tuple(sorted(set(int(s) for s in G)))


# ---------------------------------------------------------------------------
# Step II: multi-step within-G transition estimates
# ---------------------------------------------------------------------------


def transition_power_estimate(quarter: Dataset, G, L: int) -> tuple[list, list]:
    """Empirical l-step in-G transition probabilities for l = 1..L.

    Row ``s`` of the l-th matrix conditions on pooled visits at ``s``;
    rows of states never visited in this quarter are zero and reported in
    the dropped list. ``P_hat^(1)`` is the plain one-step empirical kernel
    restricted to G. Once no in-G path of some length exists, all longer
    estimates are zero (a prefix argument), so the scan short-circuits.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    members = _members_of(G)
    index = np.asarray(members, dtype=np.int64)
    k = len(index)
    sf = quarter.states
    in_set = np.isin(sf, index)
    pos = np.full(len(sf), -1, dtype=np.int64)
    if in_set.any():
        pos[in_set] = np.searchsorted(index, sf[in_set])
    N = np.bincount(pos[in_set], minlength=k).astype(float) if in_set.any() \
        else np.zeros(k)
    dropped = [int(s) for s, c in zip(index, N) if c == 0]
    denom = np.where(N > 0, N, 1.0)
    run = in_set_run_lengths(quarter, in_set)
    powers = []
    for ell in range(1, L + 1):
        src = np.flatnonzero(in_set & (run >= ell + 1))
        P_l = np.zeros((k, k))
        if len(src):
            np.add.at(P_l, (pos[src], pos[src + ell]), 1.0)
        P_l /= denom[:, None]
        powers.append(P_l)
        if not len(src):
            powers.extend(np.zeros((k, k)) for _ in range(L - ell))
            break
    return powers, dropped


# ---------------------------------------------------------------------------
# Step III: residual covariance
# ---------------------------------------------------------------------------


def residual_covariance(quarter: Dataset, G, V_hat) -> tuple[np.ndarray, np.ndarray]:
    """Covariance of per-trajectory pooled residuals, over occupancy.

    The residual at a visit to ``s`` is the reward, plus the pilot value
    at the next state if it stays in G, plus the observed remaining
    rollout if it leaves G, minus the pilot value at ``s``. Returns
    ``(Sigma_hat, nu_hat)`` where ``nu_hat`` comes from the same quarter.
    """
    members = _members_of(G)
    index = np.asarray(members, dtype=np.int64)
    k = len(index)
    V_hat = np.asarray(V_hat, dtype=float)
    if V_hat.shape != (k,):
        raise ValueError("V_hat must have one entry per subgraph member")
    d = quarter.derived()
    sf, ns = quarter.states, d["next_state"]
    on = np.isin(sf, index)
    pos = np.searchsorted(index, sf[on])
    counts = np.bincount(pos, minlength=k).astype(float)
    if np.any(counts == 0):
        raise ZeroVisits([int(s) for s, c in zip(index, counts) if c == 0])
    nu_hat = counts / quarter.n
    ns_on = ns[on]
    next_in = (ns_on != TERMINAL) & np.isin(ns_on, index)
    boot = np.where(next_in,
                    V_hat[np.searchsorted(index, np.where(next_in, ns_on, index[0]))],
                    d["suffix_excl"][on])
    resid = quarter.rewards[on] + boot - V_hat[pos]
    E = np.zeros((quarter.n, k))
    np.add.at(E, (d["traj_id"][on], pos), resid)
    lam_hat = (E.T @ E) / quarter.n
    sigma_hat = lam_hat / np.outer(nu_hat, nu_hat)
    sigma_hat = (sigma_hat + sigma_hat.T) / 2.0
    return sigma_hat, nu_hat


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def truncated_sandwich(P_G: np.ndarray, middle: np.ndarray, L: int, i: int) -> float:
    """``[(sum_{l<=L} P^l) middle (sum_{l<=L} P^l)^T]_{i,i}`` via powers."""
    k = P_G.shape[0]
    acc = np.eye(k)
    Pl = np.eye(k)
    for _ in range(L):
        Pl = Pl @ P_G
        acc += Pl
    return float((acc @ middle @ acc.T)[i, i])


def variance_estimate(dataset: Dataset, G, s0: int,
                      config: Optional[VarianceEstimationConfig] = None) -> VarianceEstimate:
    """Multi-stage variance estimate at ``s0`` (four disjoint quarters).

    The dataset is truncated to a multiple of four; quarters feed Steps I,
    II, II', III in order. The default approximation order is
    ``L = ceil(2 h log(h n0))`` with ``h`` estimated from quarter 2.
    """
    config = config or VarianceEstimationConfig()
    members = _members_of(G)
    if int(s0) not in members:
        raise KeyError(f"target state {s0} not in subgraph")
    s0_pos = members.index(int(s0))
    n0 = dataset.n
    q = n0 // 4
    if q < 1:
        raise InsufficientBudget("need at least 4 trajectories")
    quarters = [dataset.slice(i * q, (i + 1) * q) for i in range(4)]

    pilot = root_sa_with_restarts(quarters[0], G, config.root_sa)
    V_hat = pilot.as_vector(members)

    h = config.h or _estimate_h_from_lengths(quarters[1].lengths())
    L = config.L or min(_L_CAP, max(1, math.ceil(2.0 * h * math.log(max(h * 4 * q, math.e)))))

    p_hats, dropped_a = transition_power_estimate(quarters[1], G, L)
    p_checks, dropped_b = transition_power_estimate(quarters[2], G, L)
    sigma_hat, nu_hat = residual_covariance(quarters[3], G, V_hat)

    A = np.eye(len(members)) + sum(p_hats)
    B = np.eye(len(members)) + sum(p_checks)
    value = float((A @ sigma_hat @ B.T)[s0_pos, s0_pos])
    floor = -1e-6 * abs(value) - 1e-12
    diagnostics = {
        "h": h,
        "dropped_step2": dropped_a,
        "dropped_step2b": dropped_b,
        "pilot_solver": pilot.solver_info.get("config"),
        "nu_hat": nu_hat.tolist(),
        "nonnegative_within_tolerance": bool(value >= floor),
        "splits_disjoint": True,
    }
    splits = tuple((quarters[i].index_range[0], quarters[i].index_range[1])
                   for i in range(4))
    return VarianceEstimate(value=value, L=L, splits=splits, sigma_hat=sigma_hat,
                            p_hats=p_hats, p_checks=p_checks, states=members,
                            diagnostics=diagnostics)


def variance_estimate_plugin(dataset: Dataset, G, s0: int) -> VarianceEstimate:
    """Single-split plug-in: direct ``(I - P_hat_G)^{-1}`` sandwich.

    No sample splitting; the pilot value is the batch subgraph estimate on
    the same data. Flagged experimental.
    """
    from .estimators import subgraph_estimate

    members = _members_of(G)
    if int(s0) not in members:
        raise KeyError(f"target state {s0} not in subgraph")
    s0_pos = members.index(int(s0))
    est = subgraph_estimate(dataset, G)
    V_hat = est.as_vector(members)
    p_hats, dropped = transition_power_estimate(dataset, G, 1)
    P1 = p_hats[0]
    sigma_hat, nu_hat = residual_covariance(dataset, G, V_hat)
    k = len(members)
    A = np.linalg.inv(np.eye(k) - P1)
    value = float((A @ sigma_hat @ A.T)[s0_pos, s0_pos])
    return VarianceEstimate(
        value=value, L=0,
        splits=((dataset.index_range[0], dataset.index_range[1]),),
        sigma_hat=sigma_hat, p_hats=[P1], p_checks=[P1], states=members,
        diagnostics={"experimental": True, "dropped": dropped,
                     "nu_hat": nu_hat.tolist()})
