"""Exact asymptotic covariances of the TD, MC and subgraph-bootstrap estimators.

For a subset G of the state space, the subgraph estimator's error
``sqrt(n) (V_G - V_hat_G)`` is asymptotically normal with covariance
``(I - P_G)^{-1} Sigma_G (I - P_G)^{-T}`` where ``Sigma_G`` normalizes an
un-normalized per-trajectory covariance ``Lambda_G`` by the occupancy
measure. ``Lambda_G`` splits into a bootstrap part (one-step variances on
the diagonal), a rollout part (sub-trajectories leaving G), and their
cross terms.

All infinite time sums factor exactly through the fundamental matrix
``M = (I - P)^{-1}``: with ``w = M sigma2`` (expected remaining one-step
variance), ``C = P_out M`` (expected visits after an immediate exit) and
``y = P_out w``,

    Lambda_G(s,s') = d_ss' nu(s) sigma2(s)
                   + nu(s') C(s',s) sigma2(s) + nu(s) C(s,s') sigma2(s')
                   + d_ss' nu(s) y(s) + nu(s) C(s,s') y(s') + nu(s') C(s',s) y(s)

and the every-visit MC covariance is

    Lambda_MC(s,s') = nu(s) M(s,s') w(s') + nu(s') (M(s',s) - d_ss') w(s).

The default method is this exact factorization; a truncated matrix-power
("dp") route and a Monte-Carlo oracle are provided as cross-checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    MrpError,
    NotTransient,
    TruncationBudgetExceeded,
    ZeroOccupancy,
)
from .mrp_core import Mrp, exact_occupancy, exact_value, one_step_variance, validate

_PSD_FLOOR = 1e-8
_DP_POWER_CAP = 20000


# ---------------------------------------------------------------------------
# Subgraph / report types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Subgraph:
    """An ordered subset of non-terminal states indexing the sub-operator."""

    members: tuple

    def __post_init__(self):
        members = tuple(sorted(set(int(s) for s in self.members)))
        if not members:
            raise ValueError("a subgraph must be nonempty")
        if members[0] < 0:
            raise ValueError("subgraph members must be state ids (nonnegative)")
        object.__setattr__(self, "members", members)

    @classmethod
    def of(cls, x) -> "Subgraph":
        return x if isinstance(x, Subgraph) else cls(tuple(x))

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, s) -> bool:
        return int(s) in self.members

    def __iter__(self):
        return iter(self.members)

    def position(self, s: int) -> int:
        try:
            return self.members.index(int(s))
        except ValueError:
            raise KeyError(f"state {s} not in subgraph") from None


@dataclass
class CovarianceReport:
    """Asymptotic covariance matrices with method provenance.

    ``lambda_`` is the un-normalized single-trajectory covariance,
    ``sigma = D_nu^-1 lambda_ D_nu^-1`` and ``sandwiched`` applies
    ``(I - P_G)^-1`` on both sides (``(I - P)^-1`` for TD). ``states``
    names the rows/columns.
    """

    states: tuple
    lambda_: np.ndarray
    sigma: np.ndarray
    sandwiched: np.ndarray
    method: dict
    components: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method.get("name") in ("exact", "truncated_dp"):
            for name, mat in (("lambda", self.lambda_), ("sigma", self.sigma)):
                _check_symmetric_psd(mat, name)

    def position(self, s: int) -> int:
        try:
            return self.states.index(int(s))
        except ValueError:
            raise KeyError(f"state {s} not covered by this report") from None

    def variance_at(self, s: int) -> float:
        i = self.position(s)
        return float(self.sandwiched[i, i])

    def to_json(self) -> dict:
        out = {
            "states": list(self.states),
            "lambda": self.lambda_.tolist(),
            "sigma": self.sigma.tolist(),
            "sandwiched": self.sandwiched.tolist(),
            "method": self.method,
            "diagnostics": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                            for k, v in self.diagnostics.items()},
        }
        if self.components:
            out["components"] = {k: v.tolist() for k, v in self.components.items()}
        return out


def _check_symmetric_psd(mat: np.ndarray, name: str) -> None:
    if not np.allclose(mat, mat.T, atol=1e-8 * (1 + np.abs(mat).max())):
        raise MrpError(f"{name} matrix is not symmetric")
    trace = float(np.trace(mat))
    if mat.shape[0]:
        floor = -_PSD_FLOOR * max(trace, 1e-300)
        lam_min = float(np.linalg.eigvalsh((mat + mat.T) / 2).min())
        if lam_min < floor - 1e-15:
            raise MrpError(f"{name} matrix violates the PSD floor: "
                           f"min eig {lam_min}, trace {trace}")


# ---------------------------------------------------------------------------
# Shared exact structure
# ---------------------------------------------------------------------------


class _Structure:
    """Exact quantities of the reachable sub-chain, computed once.

    Everything is restricted to states reachable from the initial
    distribution (the reachable set is closed under transitions, so the
    restricted kernel is exact, and occupancies there are positive).
    """

    def __init__(self, mrp: Mrp, check: bool = True):
        if check:
            report = validate(mrp)
            if not report.ok:
                report.raise_on_error()
        self.mrp = mrp
        self.reachable = mrp.reachable_states()
        r = self.reachable
        self.P = mrp.transition[np.ix_(r, r)]
        self.mu = mrp.initial[r]
        k = len(r)
        V_full = exact_value(mrp, check=False)
        sigma2_full = one_step_variance(mrp, V_full)
        nu_full = exact_occupancy(mrp, check=False)
        self.V = V_full[r]
        self.sigma2 = sigma2_full[r]
        self.nu = nu_full[r]
        self.M = np.linalg.inv(np.eye(k) - self.P)
        self.w = self.M @ self.sigma2
        self.expected_length = float(self.nu.sum())
        self._local = {int(s): i for i, s in enumerate(r)}

    def local_index(self, states: Sequence[int]) -> np.ndarray:
        missing = [int(s) for s in states if int(s) not in self._local]
        if missing:
            raise ZeroOccupancy(missing)
        return np.array([self._local[int(s)] for s in states], dtype=np.int64)

    def exit_mask(self, g_local: np.ndarray) -> np.ndarray:
        """Mask of reachable states *outside* the subgraph."""
        mask = np.ones(len(self.reachable), dtype=bool)
        mask[g_local] = False
        return mask


def _sandwich(P_sub: np.ndarray, middle: np.ndarray) -> np.ndarray:
    k = P_sub.shape[0]
    A = np.linalg.inv(np.eye(k) - P_sub)
    return A @ middle @ A.T


# ---------------------------------------------------------------------------
# TD and MC covariances
# ---------------------------------------------------------------------------


def sigma_td(mrp: Mrp, states: Optional[Sequence[int]] = None, check: bool = True) -> CovarianceReport:
    """Asymptotic covariance of the TD estimator.

    ``sigma`` is ``diag(sigma2(s) / nu(s))`` and ``sandwiched`` its
    ``(I - P)^{-1}``-conjugation over the reachable chain. The report also
    carries the equivalent per-state scalar form built from expected visit
    counts, and the two are cross-checked to 1e-9.
    """
    st = _Structure(mrp, check=check)
    if states is None:
        idx = np.arange(len(st.reachable))
        names = tuple(int(s) for s in st.reachable)
    else:
        idx = st.local_index(states)
        names = tuple(int(s) for s in states)
    sigma_full = np.diag(st.sigma2 / st.nu)
    lambda_full = np.diag(st.sigma2 * st.nu)
    sand_full = _sandwich(st.P, sigma_full)
    # scalar form: sum_s' E[N(s')|S_0=s]^2 sigma2(s') / nu(s')
    scalar = (st.M ** 2) @ (st.sigma2 / st.nu)
    if not np.allclose(scalar, np.diag(sand_full), atol=1e-9, rtol=1e-9):
        raise MrpError("TD variance scalar/matrix forms disagree beyond 1e-9")
    sub = np.ix_(idx, idx)
    return CovarianceReport(
        states=names,
        lambda_=lambda_full[sub],
        sigma=sigma_full[sub],
        sandwiched=sand_full[sub],
        method={"name": "exact"},
        diagnostics={"scalar_variances": scalar[idx]},
    )


def _lambda_mc_exact(st: _Structure) -> np.ndarray:
    nu, M, w = st.nu, st.M, st.w
    lam = nu[:, None] * M * w[None, :]
    lam = lam + (nu[:, None] * (M - np.eye(len(nu))) * w[None, :]).T
    return lam


def sigma_mc(mrp: Mrp, states: Optional[Sequence[int]] = None, method: str = "exact",
             T_max: Optional[int] = None, tail_tol: float = 1e-10,
             n_sim: int = 10 ** 5, seed: int = 0, check: bool = True) -> CovarianceReport:
    """Asymptotic covariance of the every-visit MC estimator.

    ``method`` selects the exact factorization (default), the truncated
    matrix-power route (``"dp"``, reports its tail bound), or a simulation
    oracle (``"mc"``, reports entrywise standard errors). The MC estimator
    bootstraps nothing, so ``sandwiched`` equals ``sigma``.
    """
    st = _Structure(mrp, check=check)
    if states is None:
        idx = np.arange(len(st.reachable))
        names = tuple(int(s) for s in st.reachable)
    else:
        idx = st.local_index(states)
        names = tuple(int(s) for s in states)
    diagnostics: dict = {}
    if method == "exact":
        lam = _lambda_mc_exact(st)
        meta = {"name": "exact"}
    elif method == "dp":
        lam, meta = _lambda_mc_dp(st, T_max, tail_tol)
    elif method == "mc":
        lam, stderr = _lambda_sim(st, g_local=None, n_sim=n_sim, seed=seed)
        meta = {"name": "monte_carlo", "n_sim": n_sim, "seed": seed}
        diagnostics["stderr"] = stderr[np.ix_(idx, idx)]
    else:
        raise ValueError(f"unknown method {method!r}")
    sigma = lam / np.outer(st.nu, st.nu)
    sub = np.ix_(idx, idx)
    return CovarianceReport(
        states=names,
        lambda_=lam[sub],
        sigma=sigma[sub],
        sandwiched=sigma[sub],
        method=meta,
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# Subgraph covariance
# ---------------------------------------------------------------------------


def _subgraph_lambda_parts(st: _Structure, g_local: np.ndarray):
    """Exact Lambda_G along with its bootstrap/rollout components."""
    out_mask = st.exit_mask(g_local)
    P_out = st.P * out_mask[None, :]  # transitions into reachable non-G states
    C = P_out @ st.M
    y = P_out @ st.w
    nu_g = st.nu[g_local]
    s2_g = st.sigma2[g_local]
    Cg = C[np.ix_(g_local, g_local)]
    yg = y[g_local]
    k = len(g_local)

    lam_x = np.diag(nu_g * s2_g)
    cross = nu_g[:, None] * Cg * s2_g[None, :]
    lam_cross = cross + cross.T
    yy = nu_g[:, None] * Cg * yg[None, :]
    lam_y = np.diag(nu_g * yg) + yy + yy.T
    lam = lam_x + lam_cross + lam_y
    return lam, lam_x, lam_y


def sigma_subgraph(mrp: Mrp, G, method: str = "exact", T_max: Optional[int] = None,
                   tail_tol: float = 1e-10, n_sim: int = 10 ** 5, seed: int = 0,
                   check: bool = True) -> CovarianceReport:
    """Asymptotic covariance of the subgraph-bootstrap estimator on G.

    Returns ``Lambda_G``, ``Sigma_G`` and the ``(I - P_G)^{-1}`` sandwich,
    with the bootstrap (``sigma_x``: diagonal one-step variances over
    occupancy) and rollout (``sigma_y``) components reported separately.
    Every member of G must have positive occupancy.
    """
    G = Subgraph.of(G)
    st = _Structure(mrp, check=check)
    g_local = st.local_index(G.members)
    names = G.members
    diagnostics: dict = {}
    if method == "exact":
        lam, lam_x, lam_y = _subgraph_lambda_parts(st, g_local)
        meta = {"name": "exact"}
    elif method == "dp":
        lam, lam_x, lam_y, meta = _lambda_subgraph_dp(st, g_local, T_max, tail_tol)
    elif method == "mc":
        lam, stderr = _lambda_sim(st, g_local=g_local, n_sim=n_sim, seed=seed)
        _, lam_x, lam_y = _subgraph_lambda_parts(st, g_local)
        meta = {"name": "monte_carlo", "n_sim": n_sim, "seed": seed}
        diagnostics["stderr"] = stderr
    else:
        raise ValueError(f"unknown method {method!r}")
    nu_g = st.nu[g_local]
    scale = np.outer(nu_g, nu_g)
    sigma = lam / scale
    P_g = st.P[np.ix_(g_local, g_local)]
    return CovarianceReport(
        states=names,
        lambda_=lam,
        sigma=sigma,
        sandwiched=_sandwich(P_g, sigma),
        method=meta,
        components={
            "lambda_x": lam_x,
            "lambda_y": lam_y,
            "sigma_x": lam_x / scale,
            "sigma_y": lam_y / scale,
        },
        diagnostics=diagnostics,
    )


def check_transient(mrp: Mrp, G) -> bool:
    """Whether leaving G makes returning to G impossible.

    Graph reachability: no state outside G that is reachable in one step
    from G may reach G (the terminal state never returns anywhere).
    """
    G = Subgraph.of(G)
    members = set(G.members)
    P = mrp.transition
    n = mrp.n_states
    adj = P > 0.0
    exits = set()
    for s in members:
        if s >= n:
            continue
        for u in np.flatnonzero(adj[s]):
            if int(u) not in members:
                exits.add(int(u))
    if not exits:
        return True
    # can any exit state reach G?
    seen = np.zeros(n, dtype=bool)
    frontier = list(exits)
    for u in frontier:
        seen[u] = True
    while frontier:
        u = frontier.pop()
        if u in members:
            return False
        for v in np.flatnonzero(adj[u]):
            if int(v) in members:
                return False
            if not seen[v]:
                seen[v] = True
                frontier.append(int(v))
    return True


def sigma_subgraph_transient(mrp: Mrp, G, check: bool = True) -> CovarianceReport:
    """Covariance on a transient subgraph via the diagonal closed form.

    Independent route from :func:`sigma_subgraph`: no return to G means
    ``Sigma_G`` is diagonal with entries
    ``(sigma2(s) + P(exit | s) * sigma2_out(s)) / nu(s)`` where
    ``sigma2_out`` conditions the remaining one-step-variance mass on an
    immediate exit.
    """
    G = Subgraph.of(G)
    if not check_transient(mrp, G):
        raise NotTransient(f"subgraph {G.members} can be re-entered")
    st = _Structure(mrp, check=check)
    g_local = st.local_index(G.members)
    out_mask = st.exit_mask(g_local)
    P_g_rows = st.P[g_local]
    exit_prob = 1.0 - P_g_rows[:, ~out_mask].sum(axis=1)
    # mass of future one-step variance through reachable non-G successors;
    # the terminal branch contributes zero
    y = (P_g_rows * out_mask[None, :]) @ st.w
    nu_g = st.nu[g_local]
    s2_g = st.sigma2[g_local]
    sigma = np.diag((s2_g + y) / nu_g)
    lam = np.diag((s2_g + y) * nu_g)
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma2_out = np.where(exit_prob > 0, y / exit_prob, 0.0)
    P_g = st.P[np.ix_(g_local, g_local)]
    return CovarianceReport(
        states=G.members,
        lambda_=lam,
        sigma=sigma,
        sandwiched=_sandwich(P_g, sigma),
        method={"name": "exact", "form": "transient-diagonal"},
        diagnostics={"exit_prob": exit_prob, "sigma2_out": sigma2_out},
    )


def exit_diagnostics(mrp: Mrp, G, check: bool = True) -> list:
    """Per-state structural quantities governing the subgraph variance.

    For each ``s`` in G: the one-step variance over occupancy, and the
    exit probability over occupancy (the two terms that drive the
    achievable variance; no universal-constant inequality is asserted).
    ``exit_prob`` counts every way of leaving G, terminal included;
    ``exit_prob_nonterminal`` keeps only exits into live states, the part
    that actually carries rollout variance.
    """
    G = Subgraph.of(G)
    st = _Structure(mrp, check=check)
    g_local = st.local_index(G.members)
    in_g = np.zeros(len(st.reachable), dtype=bool)
    in_g[g_local] = True
    rows = []
    for s, li in zip(G.members, g_local):
        exit_prob = 1.0 - float(st.P[li, in_g].sum())
        exit_nonterm = float(st.P[li, ~in_g].sum())
        nu = float(st.nu[li])
        rows.append({
            "state": int(s),
            "nu": nu,
            "sigma2": float(st.sigma2[li]),
            "sigma2_over_nu": float(st.sigma2[li]) / nu,
            "exit_prob": exit_prob,
            "exit_prob_nonterminal": exit_nonterm,
            "exit_over_nu": exit_prob / nu,
        })
    return rows


# ---------------------------------------------------------------------------
# Truncated matrix-power (dp) route
# ---------------------------------------------------------------------------


def _default_t_max(st: _Structure, tail_tol: float) -> tuple[int, float]:
    """Smallest k with ||P^k||_inf (k + E[T])^2 <= tail_tol."""
    v = np.ones(len(st.reachable))
    ET = st.expected_length
    for k in range(1, _DP_POWER_CAP + 1):
        v = st.P @ v
        norm = float(v.max()) if v.size else 0.0
        if norm * (k + ET) ** 2 <= tail_tol:
            return k, norm
    raise TruncationBudgetExceeded(
        f"no horizon satisfying tail tolerance {tail_tol} within {_DP_POWER_CAP} powers")


def _dp_partial_sums(st: _Structure, T: int):
    """q = sum_t mu^T P^t, Mtr = sum_d P^d, wtr = sum_d P^d sigma2, all to T."""
    k = len(st.reachable)
    Mtr = np.eye(k)
    Pp = np.eye(k)
    for _ in range(T):
        Pp = Pp @ st.P
        Mtr += Pp
    wtr = Mtr @ st.sigma2
    nutr = Mtr.T @ st.mu
    return nutr, Mtr, wtr


def _lambda_mc_dp(st: _Structure, T_max: Optional[int], tail_tol: float):
    if T_max is None:
        T_max, norm = _default_t_max(st, tail_tol)
    else:
        v = np.ones(len(st.reachable))
        for _ in range(T_max):
            v = st.P @ v
        norm = float(v.max()) if v.size else 0.0
    nutr, Mtr, wtr = _dp_partial_sums(st, T_max)
    lam = nutr[:, None] * Mtr * wtr[None, :]
    lam = lam + (nutr[:, None] * (Mtr - np.eye(len(nutr))) * wtr[None, :]).T
    tail_bound = 8.0 * norm * (T_max + st.expected_length + 2) ** 2 * max(st.sigma2.max(), 1e-300)
    return lam, {"name": "truncated_dp", "T_max": T_max, "tail_bound": tail_bound}


def _lambda_subgraph_dp(st: _Structure, g_local: np.ndarray, T_max: Optional[int],
                        tail_tol: float):
    if T_max is None:
        T_max, norm = _default_t_max(st, tail_tol)
    else:
        v = np.ones(len(st.reachable))
        for _ in range(T_max):
            v = st.P @ v
        norm = float(v.max()) if v.size else 0.0
    nutr, Mtr, wtr = _dp_partial_sums(st, T_max)
    out_mask = st.exit_mask(g_local)
    P_out = st.P * out_mask[None, :]
    C = P_out @ Mtr
    y = P_out @ wtr
    nu_g = nutr[g_local]
    s2_g = st.sigma2[g_local]
    Cg = C[np.ix_(g_local, g_local)]
    yg = y[g_local]
    lam_x = np.diag(nu_g * s2_g)
    cross = nu_g[:, None] * Cg * s2_g[None, :]
    yy = nu_g[:, None] * Cg * yg[None, :]
    lam_y = np.diag(nu_g * yg) + yy + yy.T
    lam = lam_x + cross + cross.T + lam_y
    tail_bound = 16.0 * norm * (T_max + st.expected_length + 2) ** 2 * max(st.sigma2.max(), 1e-300)
    return lam, lam_x, lam_y, {"name": "truncated_dp", "T_max": T_max, "tail_bound": tail_bound}


# ---------------------------------------------------------------------------
# Monte-Carlo oracle route
# ---------------------------------------------------------------------------


def _lambda_sim(st: _Structure, g_local: Optional[np.ndarray], n_sim: int, seed: int):
    """Estimate Lambda by simulating the per-trajectory error vectors.

    With ``g_local=None`` estimates the MC matrix (rollout residuals at
    every visit); otherwise the subgraph matrix (bootstrap residual plus
    exit rollouts on members of G).
    """
    from .sampling import sample_dataset

    ds = sample_dataset(st.mrp, n_sim, seed)
    d = ds.derived()
    local = np.full(st.mrp.n_states + 1, -1, dtype=np.int64)
    local[st.reachable] = np.arange(len(st.reachable))
    sf = local[ds.states]
    ns_raw = d["next_state"]
    ns = np.where(ns_raw >= 0, local[np.maximum(ns_raw, 0)], -1)
    V = st.V
    if g_local is None:
        idx_of = np.full(len(st.reachable), -1, dtype=np.int64)
        idx_of[np.arange(len(st.reachable))] = np.arange(len(st.reachable))
        k = len(st.reachable)
        members_mask = np.ones(len(st.reachable), dtype=bool)
    else:
        idx_of = np.full(len(st.reachable), -1, dtype=np.int64)
        idx_of[g_local] = np.arange(len(g_local))
        k = len(g_local)
        members_mask = np.zeros(len(st.reachable), dtype=bool)
        members_mask[g_local] = True

    Z = np.zeros((n_sim, k))
    onG = members_mask[sf]
    rows = d["traj_id"][onG]
    cols = idx_of[sf[onG]]
    if g_local is None:
        contrib = V[sf[onG]] - d["suffix_incl"][onG]
    else:
        nsg = ns[onG]
        next_in_g = (nsg >= 0) & members_mask[np.maximum(nsg, 0)]
        v_next = np.where(nsg >= 0, V[np.maximum(nsg, 0)], 0.0)
        x_part = V[sf[onG]] - ds.rewards[onG] - v_next
        y_part = np.where(next_in_g, 0.0, v_next - d["suffix_excl"][onG])
        contrib = x_part + y_part
    np.add.at(Z, (rows, cols), contrib)
    mean = Z.mean(axis=0)
    lam = (Z.T @ Z) / n_sim - np.outer(mean, mean)
    # entrywise standard error of the product moments (uncentered is fine:
    # the Z's are mean-zero in population)
    P1 = (Z.T @ Z) / n_sim
    Z2 = Z ** 2
    P2 = (Z2.T @ Z2) / n_sim
    stderr = np.sqrt(np.maximum(P2 - P1 ** 2, 0.0) / n_sim)
    return lam, stderr


# ---------------------------------------------------------------------------
# Refined diagonal oracle (loop/exit moment decomposition)
# ---------------------------------------------------------------------------


@dataclass
class RefinedDiagonalEstimate:
    value: float
    stderr: float
    moments: dict

    def agrees_with(self, target: float, n_se: float = 3.0) -> bool:
        return abs(self.value - target) <= n_se * max(self.stderr, 1e-300)


def refined_diagonal_oracle(mrp: Mrp, G, s: int, n_sim: int = 10 ** 5,
                            seed: int = 0, check: bool = True) -> RefinedDiagonalEstimate:
    """Monte-Carlo estimate of ``Lambda_G(s, s)`` via exit-count moments.

    Decomposes the diagonal through the number ``K`` of exits from G taken
    at ``s``, the per-loop and post-final-exit visit counts and one-step
    variance masses:

        Lambda_G(s,s) = nu(s) sigma2(s)
                      + E[(K-1)K(2K-1)]/6 * sigma2_loop + E[K^2] * sigma2_out
                      + (E[(K-1)K] * nu_loop + 2 E[K] * nu_out) * sigma2(s)

    The cross coefficient follows from the renewal decomposition: after
    the k-th exit the expected number of future visits to ``s`` is
    ``(K - k) nu_loop + nu_out``, so the doubled sum over exits carries
    ``E[K(K-1)] nu_loop + 2 E[K] nu_out``. (A cubic coefficient would
    only coincide for K <= 1, i.e. on transient subgraphs.)

    Two simulation phases: (a) exit-count moments and nu(s) under the
    initial law; (b) loop/exit masses for the chain started at ``s`` and
    conditioned on an immediate exit. Simulation-only on purpose: the
    loop/exit moments condition on events with no closed linear-algebra
    form, which makes this an independent oracle for the exact solvers.
    """
    from .sampling import overflow_stream, sample_dataset

    G = Subgraph.of(G)
    if int(s) not in G.members:
        raise KeyError(f"target state {s} not in subgraph")
    st = _Structure(mrp, check=check)
    (s_local,) = st.local_index([s])
    g_local = st.local_index(G.members)
    members_mask = np.zeros(len(st.reachable), dtype=bool)
    members_mask[g_local] = True
    sigma2 = st.sigma2
    local = np.full(mrp.n_states + 1, -1, dtype=np.int64)
    local[st.reachable] = np.arange(len(st.reachable))

    def next_in_g_mask(ds):
        ns_raw = ds.derived()["next_state"]
        lcl = local[np.maximum(ns_raw, 0)]
        return (ns_raw >= 0) & members_mask[np.maximum(lcl, 0)] & (lcl >= 0)

    def mom(x):
        x = np.asarray(x, dtype=float)
        if len(x) == 0:
            return 0.0, 0.0
        se = x.std(ddof=1) / np.sqrt(len(x)) if len(x) > 1 else 0.0
        return float(x.mean()), float(se)

    # phase (a): exit-count moments and nu(s) under the initial law
    ds = sample_dataset(mrp, n_sim, seed)
    d = ds.derived()
    sf = local[ds.states]
    at_s = sf == s_local
    exit_here = at_s & ~next_in_g_mask(ds)
    K = np.bincount(d["traj_id"][exit_here], minlength=n_sim).astype(float)
    visits_s = np.bincount(d["traj_id"][at_s], minlength=n_sim).astype(float)

    nu_s = mom(visits_s)
    k2 = mom(K ** 2)
    loop_s2_poly = mom((K - 1) * K * (2 * K - 1) / 6.0)
    loop_nu_poly = mom((K - 1) * K)
    out_nu_poly = mom(2.0 * K)

    # phase (b): from s, first step conditioned to leave G
    p_row = st.P[s_local]
    exit_weights = np.where(members_mask, 0.0, p_row)
    exit_mass_reach = float(exit_weights.sum())
    p_exit = 1.0 - float(p_row[members_mask].sum())
    cond = {"nu_loop": (0.0, 0.0), "nu_out": (0.0, 0.0),
            "sigma2_loop": (0.0, 0.0), "sigma2_out": (0.0, 0.0)}
    if p_exit > 1e-15:
        rng = overflow_stream(seed ^ 0x5BF03635, 1)
        p_term_branch = min(max((p_exit - exit_mass_reach) / p_exit, 0.0), 1.0)
        n_term = int(rng.binomial(n_sim, p_term_branch))
        n_walk = n_sim - n_term
        loops_nu, loops_s2 = [], []
        outs_nu = [np.zeros(n_term)]
        outs_s2 = [np.zeros(n_term)]
        if n_walk and exit_mass_reach > 0:
            init = np.zeros(mrp.n_states)
            init[st.reachable] = exit_weights / exit_mass_reach
            conditioned = Mrp(mrp.transition, mrp.rewards, init)
            ds_b = sample_dataset(conditioned, n_walk, seed ^ 0x0B5E55ED)
            d_b = ds_b.derived()
            sf_b = local[ds_b.states]
            exit_b = (sf_b == s_local) & ~next_in_g_mask(ds_b)
            # first exit position per trajectory (or the end if none)
            sentinel = len(sf_b)
            first = np.full(n_walk, sentinel, dtype=np.int64)
            hits = np.flatnonzero(exit_b)
            if len(hits):
                np.minimum.at(first, d_b["traj_id"][hits], hits)
            cs_v = np.concatenate([[0.0], np.cumsum(sf_b == s_local)])
            cs_s2 = np.concatenate([[0.0], np.cumsum(sigma2[sf_b])])
            o = ds_b.offsets[:-1]
            e = ds_b.offsets[1:]
            has_loop = first < sentinel
            f = first[has_loop]
            # loop sums cover time 0 (the state s itself) plus everything
            # strictly before the next exit-at-s
            loops_nu = 1.0 + (cs_v[f] - cs_v[o[has_loop]])
            loops_s2 = sigma2[s_local] + (cs_s2[f] - cs_s2[o[has_loop]])
            oo = o[~has_loop]
            ee = e[~has_loop]
            outs_nu.append(cs_v[ee] - cs_v[oo])
            outs_s2.append(cs_s2[ee] - cs_s2[oo])
        cond["nu_loop"] = mom(loops_nu)
        cond["sigma2_loop"] = mom(loops_s2)
        cond["nu_out"] = mom(np.concatenate(outs_nu))
        cond["sigma2_out"] = mom(np.concatenate(outs_s2))

    s2_s = float(sigma2[s_local])
    terms = [
        (nu_s[0] * s2_s, nu_s[1] * s2_s),
        (loop_s2_poly[0] * cond["sigma2_loop"][0],
         _prod_se(*loop_s2_poly, *cond["sigma2_loop"])),
        (k2[0] * cond["sigma2_out"][0], _prod_se(*k2, *cond["sigma2_out"])),
        (loop_nu_poly[0] * cond["nu_loop"][0] * s2_s,
         s2_s * _prod_se(*loop_nu_poly, *cond["nu_loop"])),
        (out_nu_poly[0] * cond["nu_out"][0] * s2_s,
         s2_s * _prod_se(*out_nu_poly, *cond["nu_out"])),
    ]
    value = sum(t[0] for t in terms)
    # conservative: the phase-(a) moments share the same replicates, so
    # bound the stderr of the sum by the sum of stderrs
    stderr = float(sum(t[1] for t in terms))
    moments = {
        "nu_s": nu_s[0], "E_K2": k2[0],
        "E_loop_s2_poly": loop_s2_poly[0], "E_loop_nu_poly": loop_nu_poly[0],
        "E_out_nu_poly": out_nu_poly[0],
        "nu_loop": cond["nu_loop"][0], "nu_out": cond["nu_out"][0],
        "sigma2_loop": cond["sigma2_loop"][0], "sigma2_out": cond["sigma2_out"][0],
    }
    return RefinedDiagonalEstimate(value=float(value), stderr=stderr, moments=moments)


def _prod_se(a, a_se, b, b_se) -> float:
    # delta method for a product of independent estimates
    return float(np.sqrt((a * b_se) ** 2 + (b * a_se) ** 2 + (a_se * b_se) ** 2))
