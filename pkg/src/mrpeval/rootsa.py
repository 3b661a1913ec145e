"""Variance-reduced recursive stochastic approximation for the subgraph fixed point.

The online solver tracks a recursive control-variate average of operator
increments: after a burn-in of ``B0`` mini-batch oracles evaluated at the
start point,

    u_t = (F_t(theta_{t-1}) - theta_{t-1})
        + (t-1)/t * ( u_{t-1} - (F_t(theta_{t-2}) - theta_{t-2}) ),
    theta_t = theta_{t-1} + eta * u_t,

where each stochastic operator ``F_t`` is built from a fresh mini-batch of
``m`` trajectories and preconditioned by inverse-occupancy weights
``w = 1 / (2 nu_hat)`` estimated on an auxiliary split (never shared with
the oracle stream). A restart wrapper re-seeds the start point a few times
to forget the initialization faster, then spends the remaining budget on
one long run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional

import numpy as np

from .errors import InsufficientBudget, NonFiniteIterate, ZeroVisits
from .estimators import CONVENTION, EstimateResult
from .mrp_core import TERMINAL, Mrp
from .sampling import Dataset

#: Floor on the number of oracle steps the auto-resolver keeps available.
_MIN_STEPS = 8


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class RootSaConfig:
    """Tuning parameters; ``None`` fields are resolved from the data.

    ``c`` and ``c_prime`` stand in for unspecified universal constants
    (default 1). Auto-resolution computes the nominal schedule
    ``m = c h log(n/delta) / nu_min``, ``eta = sqrt(m/n)``,
    ``B0 = c' h log(n/delta) / eta``, ``K_restart = ceil(3 log n)`` with
    ``nu_min`` replaced by its auxiliary estimate (clipped at ``1/n_A``),
    then projects onto the available trajectory budget; a projection is
    flagged as ``budget_adjusted`` in the diagnostics.
    """

    eta: Optional[float] = None
    m: Optional[int] = None
    B0: Optional[int] = None
    K_restart: Optional[int] = None
    n_A: Optional[int] = None
    c: float = 1.0
    c_prime: float = 1.0
    delta: float = 0.1
    h: Optional[float] = None
    trace: bool = False

    def __post_init__(self):
        if self.eta is not None and not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")
        for name in ("m", "B0", "K_restart", "n_A"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.B0 is not None and self.B0 < 2:
            raise ValueError("B0 must be >= 2")


@dataclass
class WeightVector:
    """Inverse-occupancy preconditioner built from the auxiliary split only."""

    states: tuple
    w: np.ndarray
    nu_hat: np.ndarray
    n_aux: int

    def __post_init__(self):
        if np.any(self.w <= 0):
            raise ValueError("weights must be positive")


def compute_weights(aux_dataset: Dataset, G) -> WeightVector:
    """``w(s) = 1 / (2 nu_hat_A(s))`` from the auxiliary dataset.

    Raises :class:`ZeroVisits` if any member of G is unseen there.
    """
    members = tuple(G.members) if hasattr(G, "members") else tuple(sorted(set(G)))
    index = np.asarray(members, dtype=np.int64)
    sf = aux_dataset.states
    on = np.isin(sf, index)
    pos = np.searchsorted(index, sf[on])
    counts = np.bincount(pos, minlength=len(index)).astype(float)
    if np.any(counts == 0):
        raise ZeroVisits([int(s) for s, c in zip(index, counts) if c == 0])
    nu_hat = counts / max(aux_dataset.n, 1)
    return WeightVector(states=members, w=1.0 / (2.0 * nu_hat), nu_hat=nu_hat,
                        n_aux=aux_dataset.n)


# ---------------------------------------------------------------------------
# Stochastic and population operators
# ---------------------------------------------------------------------------


def stochastic_operator(batch: Dataset, theta: np.ndarray, w, G) -> np.ndarray:
    """One mini-batch application of the preconditioned subgraph operator.

    For each member ``s``: average over the batch of, per visit to ``s``,
    the bootstrap term (next state in G), the observed rollout (next state
    outside G), the reward, minus ``theta(s)``; scaled by ``w(s) / m`` and
    added to ``theta``. States unseen in the batch keep ``theta(s)``.
    """
    members = tuple(G.members) if hasattr(G, "members") else tuple(sorted(set(G)))
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (len(members),):
        raise ValueError("theta dimension must match the subgraph")
    w_arr = w.w if isinstance(w, WeightVector) else np.asarray(w, dtype=float)
    data = _compile_operator_data(batch, members)
    return _apply_operator(data, 0, batch.n, theta, w_arr, batch.n)


@dataclass
class _OperatorData:
    """Flat per-visit arrays for fast mini-batch operator evaluation."""

    vis_pos: np.ndarray      # local index of the visited member
    next_pos: np.ndarray     # local index of the next state, -1 if not in G
    suffix_out: np.ndarray   # rollout after the visit when leaving G, else 0
    reward: np.ndarray
    traj_starts: np.ndarray  # per trajectory: slice bounds into the arrays
    k: int


def _compile_operator_data(dataset: Dataset, members: tuple) -> _OperatorData:
    index = np.asarray(members, dtype=np.int64)
    d = dataset.derived()
    sf, ns = dataset.states, d["next_state"]
    on = np.isin(sf, index)
    vis_pos = np.searchsorted(index, sf[on])
    ns_on = ns[on]
    in_next = (ns_on != TERMINAL) & np.isin(ns_on, index)
    next_pos = np.where(in_next, np.searchsorted(index, np.where(in_next, ns_on, index[0])), -1)
    suffix_out = np.where(in_next, 0.0, d["suffix_excl"][on])
    reward = dataset.rewards[on]
    # trajectory boundaries within the filtered arrays
    counts = np.bincount(d["traj_id"][on], minlength=dataset.n)
    traj_starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return _OperatorData(vis_pos=vis_pos.astype(np.int64), next_pos=next_pos.astype(np.int64),
                         suffix_out=suffix_out, reward=reward,
                         traj_starts=traj_starts, k=len(index))


def _apply_operator(data: _OperatorData, lo_traj: int, hi_traj: int,
                    theta: np.ndarray, w: np.ndarray, m: int) -> np.ndarray:
    a, b = data.traj_starts[lo_traj], data.traj_starts[hi_traj]
    vis = data.vis_pos[a:b]
    nxt = data.next_pos[a:b]
    boot = np.where(nxt >= 0, theta[np.maximum(nxt, 0)], data.suffix_out[a:b])
    contrib = boot + data.reward[a:b] - theta[vis]
    acc = np.zeros(data.k)
    np.add.at(acc, vis, contrib)
    return theta + w * acc / m


def population_operator(mrp: Mrp, G, w, theta: np.ndarray,
                        V_star: Optional[np.ndarray] = None) -> np.ndarray:
    """Exact mean of the stochastic operator (oracle for unbiasedness tests).

    ``f(theta) = theta + w * nu_G * (P_G theta + P_out V* + r_G - theta)``.
    """
    from .mrp_core import exact_occupancy, exact_value

    members = tuple(G.members) if hasattr(G, "members") else tuple(sorted(set(G)))
    g = np.asarray(members, dtype=np.int64)
    theta = np.asarray(theta, dtype=float)
    w_arr = w.w if isinstance(w, WeightVector) else np.asarray(w, dtype=float)
    if V_star is None:
        V_star = exact_value(mrp)
    nu = exact_occupancy(mrp)[g]
    P = mrp.transition
    P_gg = P[np.ix_(g, g)]
    out_mask = np.ones(mrp.n_states, dtype=bool)
    out_mask[g] = False
    b_out = P[np.ix_(g, np.flatnonzero(out_mask))] @ V_star[out_mask]
    r_g = mrp.mean_rewards()[g]
    return theta + w_arr * nu * (P_gg @ theta + b_out + r_g - theta)


# ---------------------------------------------------------------------------
# Algorithm 1: the recursive solver
# ---------------------------------------------------------------------------


@dataclass
class RootSaRun:
    theta: np.ndarray
    steps: int
    trace: Optional[list] = None


def root_sa(oracle_stream: Iterable[Callable[[np.ndarray], np.ndarray]],
            theta0: np.ndarray, eta: float, B0: int, n_steps: int,
            collect_trace: bool = False) -> RootSaRun:
    """Run the recursive solver for ``n_steps`` oracle rounds.

    The first ``min(B0, n_steps)`` oracles are all evaluated at ``theta0``
    and averaged into the initial control variate; iterates stay at
    ``theta0`` during burn-in. Each later round consumes one oracle,
    applying it at both ``theta_{t-1}`` and ``theta_{t-2}``. Deterministic
    given the stream.
    """
    if B0 < 2:
        raise ValueError("B0 must be >= 2")
    theta0 = np.asarray(theta0, dtype=float)
    stream: Iterator = iter(oracle_stream)
    trace = [] if collect_trace else None
    burn = min(B0, n_steps)
    acc = np.zeros_like(theta0)
    for _ in range(burn):
        F = next(stream)
        acc = acc + (F(theta0) - theta0)
    u = acc / burn if burn else np.zeros_like(theta0)
    theta_prev2 = theta0
    theta_prev = theta0
    if trace is not None:
        trace.extend([theta0.copy()] * burn)
    for t in range(B0 + 1, n_steps + 1):
        F = next(stream)
        d1 = F(theta_prev) - theta_prev
        d2 = F(theta_prev2) - theta_prev2
        u = d1 + (t - 1) / t * (u - d2)
        theta = theta_prev + eta * u
        if not np.all(np.isfinite(theta)):
            raise NonFiniteIterate(f"iterate diverged at step {t}")
        theta_prev2 = theta_prev
        theta_prev = theta
        if trace is not None:
            trace.append(theta.copy())
    return RootSaRun(theta=theta_prev, steps=n_steps, trace=trace)


# ---------------------------------------------------------------------------
# Algorithm 2: restarts + final run over a trajectory budget
# ---------------------------------------------------------------------------


def _estimate_h_from_lengths(lengths: np.ndarray, p_max: int = 8) -> float:
    lengths = np.asarray(lengths, dtype=float)
    if len(lengths) == 0:
        return 1.0
    h = 1.0
    for p in range(1, p_max + 1):
        h = max(h, float(np.mean(lengths ** p)) ** (1.0 / p) / p)
    return h


@dataclass
class ResolvedRootSa:
    eta: float
    m: int
    B0: int
    K_restart: int
    n_A: int
    h: float
    nu_min_hat: float
    budget_adjusted: bool
    nominal: dict

    def to_json(self) -> dict:
        return {
            "eta": self.eta, "m": self.m, "B0": self.B0,
            "K_restart": self.K_restart, "n_A": self.n_A, "h": self.h,
            "nu_min_hat": self.nu_min_hat, "budget_adjusted": self.budget_adjusted,
            "nominal": self.nominal,
        }


def resolve_config(config: Optional[RootSaConfig], dataset: Dataset, G) -> ResolvedRootSa:
    """Fill unset fields from the schedule, then fit the trajectory budget."""
    config = config or RootSaConfig()
    n = dataset.n
    if n < 4:
        raise InsufficientBudget(f"need at least 4 trajectories, got {n}")
    delta = config.delta
    log_term = max(math.log(max(n / delta, math.e)), 1.0)
    h = config.h or _estimate_h_from_lengths(dataset.lengths())

    if config.n_A is not None and config.n_A > n - 3:
        raise InsufficientBudget(f"n_A={config.n_A} leaves no oracle budget from n={n}")
    n_A = config.n_A or min(n // 4, max(16, math.ceil(config.c * h * log_term)))
    n_A = max(1, min(n_A, n - 3))
    aux = dataset.slice(0, n_A)
    weights = compute_weights(aux, G)
    nu_min_hat = max(float(weights.nu_hat.min()), 1.0 / n_A)
    n_run = n - n_A

    m_nominal = math.ceil(config.c * h * log_term / nu_min_hat)
    m = config.m or max(1, min(m_nominal, max(1, n_run // 96)))
    eta = config.eta or min(1.0, math.sqrt(m / n_run))
    steps_total = n_run // m
    B0_nominal = math.ceil(config.c_prime * h * log_term / eta)
    # when the nominal burn-in cannot fit, keep B0 * eta ~ 1 so each
    # restart still contracts the initialization by a constant factor
    B0_target = min(B0_nominal, max(2, math.ceil(1.0 / eta)))
    K_nominal = math.ceil(3 * math.log(max(n, 2)))
    if config.K_restart is not None:
        K = config.K_restart
    else:
        K = max(1, min(K_nominal, max(1, (steps_total // 2) // (2 * B0_target))))
    B0 = config.B0 or max(2, min(B0_target, max(2, steps_total // (4 * K))))

    budget_adjusted = (m != m_nominal) or (B0 != B0_nominal) or (K != K_nominal)
    if n_run < 2 * B0 * m * K + m:
        if config.m is not None or config.B0 is not None or config.K_restart is not None:
            raise InsufficientBudget(
                f"need n >= n_A + 2*B0*m*K_restart + m = "
                f"{n_A + 2 * B0 * m * K + m}, got {n}")
        # fall back to the smallest sensible schedule
        K = 1
        B0 = max(2, steps_total // 4)
        budget_adjusted = True
        if n_run < 2 * B0 * m * K + m:
            raise InsufficientBudget(f"dataset of {n} trajectories is too small")
    nominal = {"m": m_nominal, "B0": B0_nominal, "K_restart": K_nominal,
               "eta": math.sqrt(m_nominal / max(n_run, 1))}
    return ResolvedRootSa(eta=eta, m=m, B0=B0, K_restart=K, n_A=n_A, h=h,
                          nu_min_hat=nu_min_hat, budget_adjusted=budget_adjusted,
                          nominal=nominal)


def root_sa_with_restarts(dataset: Dataset, G, config: Optional[RootSaConfig] = None,
                          seed: Optional[int] = None) -> EstimateResult:
    """Weights from the auxiliary split, K restarts, then the final run.

    Data accounting is exact: the first ``n_A`` trajectories build the
    weights, each restart round consumes ``2 B0`` mini-batches of ``m``
    trajectories, and the final run takes every remaining full mini-batch.
    No trajectory is consumed twice. ``seed`` is recorded only; the
    procedure is deterministic given the dataset.
    """
    members = tuple(G.members) if hasattr(G, "members") else tuple(sorted(set(G)))
    resolved = resolve_config(config, dataset, G)
    collect_trace = bool(config.trace) if config is not None else False
    aux = dataset.slice(0, resolved.n_A)
    weights = compute_weights(aux, G)

    data = _compile_operator_data(dataset, members)
    cursor = resolved.n_A
    m, B0, K = resolved.m, resolved.B0, resolved.K_restart

    def make_stream(n_batches: int):
        nonlocal cursor
        for _ in range(n_batches):
            lo, hi = cursor, cursor + m
            cursor = hi
            yield lambda th, lo=lo, hi=hi: _apply_operator(data, lo, hi, th, weights.w, m)

    theta = np.zeros(len(members))
    trace_all: list = []
    for _ in range(K):
        run = root_sa(make_stream(2 * B0), theta, resolved.eta, B0, 2 * B0,
                      collect_trace=collect_trace)
        theta = run.theta
        if collect_trace:
            trace_all.extend(run.trace)
    q = (dataset.n - cursor) // m
    if q < 1:
        raise InsufficientBudget("no mini-batch left for the final run")
    run = root_sa(make_stream(q), theta, resolved.eta, B0, q, collect_trace=collect_trace)
    theta = run.theta
    if collect_trace:
        trace_all.extend(run.trace)

    leftover = dataset.n - cursor
    info = {
        "method": "root_sa",
        "config": resolved.to_json(),
        "seed": seed,
        "budget": {
            "aux": [0, resolved.n_A],
            "restart_batches": 2 * B0 * K,
            "final_batches": q,
            "consumed_trajectories": cursor,
            "leftover_trajectories": int(leftover),
        },
    }
    values = {int(s): float(v) for s, v in zip(members, theta)}
    result = EstimateResult(values=values, covered=frozenset(values), solver_info=info,
                            convention=CONVENTION)
    if collect_trace:
        result.solver_info["trace"] = [list(map(float, row)) for row in trace_all]
    return result
