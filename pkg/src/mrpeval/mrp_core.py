"""Tabular Markov reward processes and their exact (population-level) solvers.

A process lives on states ``0 .. n_states-1`` plus an implicit absorbing
terminal state: each transition row may sum to less than one, and the
deficit ``1 - sum_j P[s, j]`` is the probability of terminating from ``s``.
Rewards are drawn per visited state, independent of the next state, with
support inside ``[-1, 1]``.

Value convention: ``V(s)`` is the expected total reward collected from the
current state (inclusive) until absorption, so ``V = r + P V`` with
``V(terminal) = 0``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import (
    MrpError,
    NotAbsorbing,
    RewardOutOfBounds,
    RowSumExceedsOne,
    SingularSystem,
)

#: Sentinel for the terminal state in sampled transitions.
TERMINAL = -1

_ROW_SUM_TOL = 1e-12
_PMF_TOL = 1e-12
#: Power cap for the absorption certificate (doubling search).
_ABSORB_POWER_CAP = 2 ** 16
#: Dense linear solves up to this size; truncated Neumann summation beyond.
_DENSE_SOLVE_LIMIT = 4096


# ---------------------------------------------------------------------------
# Reward models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RewardModel:
    """Per-state reward distribution with support in [-1, 1].

    Use the constructors :meth:`deterministic`, :meth:`uniform` and
    :meth:`discrete` rather than instantiating directly.
    """

    kind: str  # "deterministic" | "uniform" | "discrete"
    params: tuple

    @staticmethod
    def deterministic(value: float) -> "RewardModel":
        return RewardModel("deterministic", (float(value),))

    @staticmethod
    def uniform(lo: float, hi: float) -> "RewardModel":
        if hi < lo:
            raise ValueError(f"uniform interval [{lo}, {hi}] is empty")
        return RewardModel("uniform", (float(lo), float(hi)))

    @staticmethod
    def discrete(values: Sequence[float], probs: Sequence[float]) -> "RewardModel":
        values = tuple(float(v) for v in values)
        probs = tuple(float(p) for p in probs)
        if len(values) != len(probs) or not values:
            raise ValueError("discrete reward needs matching nonempty values/probs")
        if any(p < 0 for p in probs):
            raise ValueError("discrete reward probabilities must be nonnegative")
        if abs(sum(probs) - 1.0) > _PMF_TOL:
            raise ValueError(f"discrete reward pmf sums to {sum(probs)}, not 1")
        return RewardModel("discrete", (values, probs))

    def mean(self) -> float:
        if self.kind == "deterministic":
            return self.params[0]
        if self.kind == "uniform":
            lo, hi = self.params
            return 0.5 * (lo + hi)
        values, probs = self.params
        return float(np.dot(values, probs))

    def variance(self) -> float:
        if self.kind == "deterministic":
            return 0.0
        if self.kind == "uniform":
            lo, hi = self.params
            return (hi - lo) ** 2 / 12.0
        values, probs = self.params
        m = self.mean()
        return float(np.dot((np.asarray(values) - m) ** 2, probs))

    def support_bounds(self) -> tuple[float, float]:
        if self.kind == "deterministic":
            v = self.params[0]
            return v, v
        if self.kind == "uniform":
            return self.params
        values, _ = self.params
        return min(values), max(values)

    def in_bounds(self, lo: float = -1.0, hi: float = 1.0) -> bool:
        a, b = self.support_bounds()
        return a >= lo - _PMF_TOL and b <= hi + _PMF_TOL

    def contains(self, r: float, tol: float = 1e-9) -> bool:
        """Whether ``r`` lies in the support (used by trajectory validation)."""
        if self.kind == "deterministic":
            return abs(r - self.params[0]) <= tol
        if self.kind == "uniform":
            lo, hi = self.params
            return lo - tol <= r <= hi + tol
        values, _ = self.params
        return any(abs(r - v) <= tol for v in values)

    def from_uniform(self, u):
        """Map uniform(0,1) draws to reward draws (vectorized)."""
        u = np.asarray(u)
        if self.kind == "deterministic":
            return np.full_like(u, self.params[0], dtype=float)
        if self.kind == "uniform":
            lo, hi = self.params
            return lo + (hi - lo) * u
        values, probs = self.params
        edges = np.cumsum(probs)
        idx = np.searchsorted(edges, u, side="right")
        idx = np.minimum(idx, len(values) - 1)
        return np.asarray(values, dtype=float)[idx]

    def sample(self, rng: np.random.Generator, size=None):
        return self.from_uniform(rng.random(size if size is not None else ()))

    def to_json(self) -> dict:
        if self.kind == "deterministic":
            return {"kind": "deterministic", "params": {"value": self.params[0]}}
        if self.kind == "uniform":
            return {"kind": "uniform", "params": {"lo": self.params[0], "hi": self.params[1]}}
        values, probs = self.params
        return {"kind": "discrete", "params": {"values": list(values), "probs": list(probs)}}

    @staticmethod
    def from_json(obj: dict) -> "RewardModel":
        kind, params = obj["kind"], obj["params"]
        if kind == "deterministic":
            return RewardModel.deterministic(params["value"])
        if kind == "uniform":
            return RewardModel.uniform(params["lo"], params["hi"])
        if kind == "discrete":
            return RewardModel.discrete(params["values"], params["probs"])
        raise ValueError(f"unknown reward kind {kind!r}")


# ---------------------------------------------------------------------------
# The process
# ---------------------------------------------------------------------------


@runtime_checkable
class LazyMrp(Protocol):
    """Sampling-only process interface for families too large to materialize.

    Exact solvers do not apply; families supply closed-form facts instead.
    """

    n_states: int

    def sample_initial(self, u: float) -> int: ...

    def sample_next(self, state: int, u: float) -> int:
        """Next state id, or :data:`TERMINAL`."""
        ...

    def sample_reward(self, state: int, u: float) -> float: ...

    def fingerprint(self) -> str: ...


class Mrp:
    """Materialized finite MRP: kernel, per-state rewards, initial law.

    Parameters
    ----------
    transition:
        ``(n, n)`` row-substochastic matrix over non-terminal states; the
        row deficit is the termination probability.
    rewards:
        One :class:`RewardModel` per state.
    initial:
        Probability vector over non-terminal states.
    """

    def __init__(self, transition, rewards: Sequence[RewardModel], initial):
        P = np.array(transition, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
            raise ValueError("transition must be a nonempty square matrix")
        n = P.shape[0]
        if len(rewards) != n:
            raise ValueError("need one reward model per state")
        mu = np.array(initial, dtype=float)
        if mu.shape != (n,):
            raise ValueError("initial distribution has wrong length")
        if np.any(P < 0) or np.any(mu < 0):
            raise ValueError("negative probabilities")
        if abs(mu.sum() - 1.0) > _ROW_SUM_TOL:
            raise ValueError(f"initial distribution sums to {mu.sum()}, not 1")
        P.setflags(write=False)
        mu.setflags(write=False)
        self.transition = P
        self.rewards = tuple(rewards)
        self.initial = mu
        self.n_states = n
        self._fingerprint: Optional[str] = None

    # -- derived vectors ----------------------------------------------------

    def mean_rewards(self) -> np.ndarray:
        return np.array([rm.mean() for rm in self.rewards])

    def reward_variances(self) -> np.ndarray:
        return np.array([rm.variance() for rm in self.rewards])

    def terminal_mass(self) -> np.ndarray:
        return 1.0 - self.transition.sum(axis=1)

    def fingerprint(self) -> str:
        if self._fingerprint is None:
            h = hashlib.sha256()
            h.update(np.ascontiguousarray(self.transition).tobytes())
            h.update(np.ascontiguousarray(self.initial).tobytes())
            h.update(json.dumps([rm.to_json() for rm in self.rewards], sort_keys=True).encode())
            self._fingerprint = h.hexdigest()[:16]
        return self._fingerprint

    def relabel(self, perm: Sequence[int]) -> "Mrp":
        """Return the same process with state ``i`` renamed ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(self.n_states)
        P = self.transition[np.ix_(inv, inv)]
        mu = self.initial[inv]
        rewards = tuple(self.rewards[i] for i in inv)
        return Mrp(P, rewards, mu)

    def reachable_states(self) -> np.ndarray:
        """States reachable from the support of the initial distribution."""
        adj = self.transition > 0.0
        seen = self.initial > 0.0
        frontier = seen.copy()
        while frontier.any():
            nxt = adj[frontier].any(axis=0) & ~seen
            seen |= nxt
            frontier = nxt
        return np.flatnonzero(seen)

    def __repr__(self) -> str:
        return f"Mrp(n_states={self.n_states}, fingerprint={self.fingerprint()})"


# ---------------------------------------------------------------------------
# Linear solves
# ---------------------------------------------------------------------------


def solve_value_system(P: np.ndarray, b: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Solve ``(I - P) x = b`` for a certified-substochastic ``P``.

    Dense LU up to ``_DENSE_SOLVE_LIMIT`` states, truncated Neumann
    summation beyond (preserves the substochastic structure and never
    forms the inverse).
    """
    n = P.shape[0]
    if n <= _DENSE_SOLVE_LIMIT:
        A = np.eye(n) - P
        try:
            x = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(str(exc)) from exc
        if not np.all(np.isfinite(x)):
            raise SingularSystem("non-finite solution")
        return x
    # Neumann: x = sum_k P^k b, stopped once the term is below tolerance
    # for a stretch long enough to bound the geometric tail.
    x = np.array(b, dtype=float)
    term = np.array(b, dtype=float)
    for _ in range(_ABSORB_POWER_CAP):
        term = P @ term
        x += term
        if np.max(np.abs(term)) <= tol:
            return x
    raise SingularSystem("Neumann summation did not converge within the cap")


def _absorption_certificate(P: np.ndarray, cap: int = _ABSORB_POWER_CAP) -> Optional[int]:
    """Smallest power-of-two ``k`` with ``||P^k||_inf <= 1/2``, or None."""
    norm = np.max(P.sum(axis=1)) if P.size else 0.0
    if norm <= 0.5:
        return 1
    Q = P
    k = 1
    while k < cap:
        Q = Q @ Q
        k *= 2
        if np.max(Q.sum(axis=1)) <= 0.5:
            return k
    return None


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    ok: bool
    issues: list = field(default_factory=list)  # (code, message) pairs
    k0: Optional[int] = None  # absorption certificate: ||P^k0||_inf <= 1/2
    unreachable: tuple = ()
    max_row_sum: float = 0.0

    def raise_on_error(self) -> None:
        for code, msg in self.issues:
            exc = {
                "RowSumExceedsOne": RowSumExceedsOne,
                "RewardOutOfBounds": RewardOutOfBounds,
                "NotAbsorbing": NotAbsorbing,
            }.get(code, MrpError)
            raise exc(msg)

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "issues": [{"code": c, "message": m} for c, m in self.issues],
            "k0": self.k0,
            "unreachable": list(self.unreachable),
            "max_row_sum": self.max_row_sum,
        }


def validate(mrp: Mrp) -> ValidationReport:
    """Check kernel/reward/absorption invariants of a materialized MRP.

    Reports (rather than raises): row sums above one, reward support
    outside [-1, 1], unreachable states, and the absorption certificate
    ``k0`` with ``||P^k0||_inf <= 1/2``.
    """
    issues = []
    row_sums = mrp.transition.sum(axis=1)
    max_row_sum = float(row_sums.max())
    for s in np.flatnonzero(row_sums > 1.0 + _ROW_SUM_TOL):
        issues.append(("RowSumExceedsOne", f"row {s} sums to {row_sums[s]:.15g}"))
    for s, rm in enumerate(mrp.rewards):
        if not rm.in_bounds():
            issues.append(("RewardOutOfBounds", f"state {s} reward support {rm.support_bounds()}"))
    k0 = None
    if not issues:
        k0 = _absorption_certificate(mrp.transition)
        if k0 is None:
            issues.append(("NotAbsorbing", f"no Neumann decay within power cap {_ABSORB_POWER_CAP}"))
    reachable = set(mrp.reachable_states().tolist())
    unreachable = tuple(s for s in range(mrp.n_states) if s not in reachable)
    return ValidationReport(
        ok=not issues,
        issues=issues,
        k0=k0,
        unreachable=unreachable,
        max_row_sum=max_row_sum,
    )


def _require_valid(mrp: Mrp) -> None:
    report = validate(mrp)
    if not report.ok:
        report.raise_on_error()


# ---------------------------------------------------------------------------
# Exact solvers
# ---------------------------------------------------------------------------


def exact_value(mrp: Mrp, check: bool = True) -> np.ndarray:
    """Value vector solving ``(I - P) V = r_mean`` (terminal value 0)."""
    if check:
        _require_valid(mrp)
    return solve_value_system(mrp.transition, mrp.mean_rewards())


def exact_occupancy(mrp: Mrp, check: bool = True) -> np.ndarray:
    """Occupancy measure: expected visit counts ``nu = (I - P)^-T mu``."""
    if check:
        _require_valid(mrp)
    return solve_value_system(mrp.transition.T, mrp.initial)


def one_step_variance(mrp: Mrp, V: np.ndarray) -> np.ndarray:
    """Per-state variance of ``R_0 + V(S_1)`` given the current state.

    Rewards are independent of the next state, so the variance splits as
    reward variance plus next-value variance; the terminal state carries
    value 0 through the row deficit.
    """
    V = np.asarray(V, dtype=float)
    if V.shape != (mrp.n_states,):
        raise ValueError("value vector has wrong length")
    P = mrp.transition
    ev = P @ V  # terminal contributes 0
    ev2 = P @ (V ** 2)
    var_next = np.maximum(ev2 - ev ** 2, 0.0)
    return mrp.reward_variances() + var_next


@dataclass
class HorizonProfile:
    """Absorption-time moments and the effective-horizon estimate.

    ``moments[p-1]`` is ``E[T^p]`` under the initial distribution;
    ``per_state[s, p-1]`` conditions on starting at ``s``. The estimate is
    the smallest ``h`` with ``E_s[T^p] <= (p h)^p`` over the computed range.
    """

    moments: np.ndarray
    per_state: np.ndarray
    h_estimate: float
    h_declared: Optional[float] = None

    @property
    def expected_length(self) -> float:
        return float(self.moments[0])

    def eff_holds(self, h: float) -> bool:
        p = np.arange(1, self.per_state.shape[1] + 1)
        return bool(np.all(self.per_state <= (p * h) ** p + 1e-9 * (p * h) ** p))

    def to_json(self) -> dict:
        return {
            "moments": self.moments.tolist(),
            "h_estimate": self.h_estimate,
            "h_declared": self.h_declared,
        }


def horizon_profile(mrp: Mrp, p_max: int = 8, h_declared: Optional[float] = None,
                    check: bool = True) -> HorizonProfile:
    """Exact absorption-time moments ``E[T^p]`` for ``p = 1..p_max``.

    First-step expansion: with ``T = 1 + T'`` and ``T' = 0`` on immediate
    termination, ``m_p = (I - P)^{-1} [ 1 + sum_{j=1}^{p-1} C(p, j) P m_j ]``.
    """
    if p_max < 1:
        raise ValueError("p_max must be >= 1")
    if check:
        _require_valid(mrp)
    P = mrp.transition
    n = mrp.n_states
    per_state = np.empty((n, p_max))
    pm = []  # P @ m_j for j = 1..p
    for p in range(1, p_max + 1):
        rhs = np.ones(n)
        for j in range(1, p):
            rhs = rhs + math.comb(p, j) * pm[j - 1]
        m_p = solve_value_system(P, rhs)
        per_state[:, p - 1] = m_p
        pm.append(P @ m_p)
    moments = mrp.initial @ per_state
    p = np.arange(1, p_max + 1)
    h_estimate = float(np.max(per_state ** (1.0 / p) / p))
    return HorizonProfile(moments=moments, per_state=per_state,
                          h_estimate=h_estimate, h_declared=h_declared)


# ---------------------------------------------------------------------------
# Spec-file I/O
# ---------------------------------------------------------------------------


def load_mrp(source) -> Mrp:
    """Load an MRP from a JSON spec (path, file object, or parsed dict).

    Schema: ``{n_states, transitions: [[s, s', p], ...],``
    ``rewards: [{state, kind, params}, ...], initial: [[s, p], ...]}``.
    The loader enforces the same invariants as :func:`validate`.
    """
    if isinstance(source, dict):
        obj = source
    elif hasattr(source, "read"):
        obj = json.load(source)
    else:
        with open(source) as fh:
            obj = json.load(fh)
    n = int(obj["n_states"])
    P = np.zeros((n, n))
    for s, s2, p in obj["transitions"]:
        P[int(s), int(s2)] += float(p)
    rewards = [RewardModel.deterministic(0.0)] * n
    for entry in obj.get("rewards", []):
        rewards[int(entry["state"])] = RewardModel.from_json(entry)
    mu = np.zeros(n)
    for s, p in obj["initial"]:
        mu[int(s)] += float(p)
    mrp = Mrp(P, rewards, mu)
    report = validate(mrp)
    if not report.ok:
        report.raise_on_error()
    return mrp


def dump_mrp(mrp: Mrp) -> dict:
    """Inverse of :func:`load_mrp` (sparse transition triplets)."""
    transitions = [
        [int(s), int(s2), float(p)]
        for s in range(mrp.n_states)
        for s2, p in enumerate(mrp.transition[s])
        if p > 0.0
    ]
    rewards = [dict(state=s, **rm.to_json()) for s, rm in enumerate(mrp.rewards)]
    initial = [[int(s), float(p)] for s, p in enumerate(mrp.initial) if p > 0.0]
    return {
        "n_states": mrp.n_states,
        "transitions": transitions,
        "rewards": rewards,
        "initial": initial,
    }
