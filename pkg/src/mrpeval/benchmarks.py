"""Canonical benchmark MRP families and the replicate experiment harness.

Families attach their closed-form facts (values, occupancies, variance
targets) so experiments can score estimates without re-deriving truth;
materializable families are cross-checked against the exact solvers in
the test suite.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ParameterMismatch
from .mrp_core import TERMINAL, Mrp, RewardModel, exact_value
from .sampling import Dataset, sample_dataset


@dataclass
class MrpFamily:
    """A named MRP constructor with closed-form facts attached."""

    name: str
    params: dict
    build: Callable[[], object]  # -> Mrp or a lazy sampling interface
    analytic_facts: dict = field(default_factory=dict)

    def params_str(self) -> str:
        return ";".join(f"{k}={v}" for k, v in sorted(self.params.items()))


# ---------------------------------------------------------------------------
# Layered MRP: k start states feeding a shared deterministic chain
# ---------------------------------------------------------------------------


def layered_mrp(k: int, T: int) -> MrpFamily:
    """k uniform start states, a shared chain of T-1 states, uniform rewards.

    Every state carries a Uniform[-1, 1] reward, so the value function is
    identically zero and every one-step variance is 1/3. At a start state
    the MC variance is ``k T / 3`` while TD achieves ``(k + T - 1) / 3``:
    the chain pools trajectories from all k starts.

    Facts attached: the start states, the chain, and the *pooling
    subgraph* ``{target} + chain`` whose sandwiched variance equals the TD
    value (k + T - 1) / 3. Bootstrapping on the start states alone does
    not pool anything: that subgraph estimator is exactly every-visit MC,
    with variance k T / 3.
    """
    if k < 1 or T < 1:
        raise ParameterMismatch("layered MRP needs k, T >= 1")
    n = k + T - 1

    def build() -> Mrp:
        P = np.zeros((n, n))
        if T >= 2:
            for i in range(k):
                P[i, k] = 1.0
            for j in range(k, n - 1):
                P[j, j + 1] = 1.0
        rewards = [RewardModel.uniform(-1.0, 1.0)] * n
        mu = np.zeros(n)
        mu[:k] = 1.0 / k
        return Mrp(P, rewards, mu)

    sources = tuple(range(k))
    chain = tuple(range(k, n))
    facts = {
        "target": 0,
        "v_star": [0.0] * n,
        "nu": [1.0 / k] * k + [1.0] * (T - 1),
        "sigma_mc_source": k * T / 3.0,
        "sigma_td_source": (k + T - 1) / 3.0,
        "sources": sources,
        "chain": chain,
        "pooling_subgraph": (0,) + chain,
        "pooling_variance": (k + T - 1) / 3.0,
        "source_subgraph_variance": k * T / 3.0,
        "h": float(T),
    }
    return MrpFamily(name="layered", params={"k": k, "T": T}, build=build,
                     analytic_facts=facts)


# ---------------------------------------------------------------------------
# TD finite-sample failure family (lazy)
# ---------------------------------------------------------------------------


class TdFailureLazy:
    """Hub-and-spokes MRP with N parallel branches, sampled procedurally.

    State ids: 0 is the start; ``1..N`` the looping branch states;
    ``N+1..2N`` their reward-1 successors; ``2N+1`` the absorbing-ish tail.
    Never materializes the kernel, so N can be astronomically large.
    """

    def __init__(self, N: int, gamma: float = 0.5):
        if N < 1:
            raise ParameterMismatch("need N >= 1")
        if not 0.0 < gamma < 1.0:
            raise ParameterMismatch("need 0 < gamma < 1")
        self.N = int(N)
        self.gamma = float(gamma)
        self.n_states = 2 * self.N + 2

    def sample_initial(self, u: float) -> int:
        return 0

    def sample_next(self, state: int, u: float) -> int:
        g, N = self.gamma, self.N
        if state == 0:
            if u < g:
                return 1 + min(int(u / g * N), N - 1)
            return TERMINAL
        if 1 <= state <= N:
            if u < g / 2:
                return state
            if u < g:
                return state + N
            return TERMINAL
        if state <= 2 * N:
            return 2 * N + 1 if u < g else TERMINAL
        return state if u < g else TERMINAL

    def sample_reward(self, state: int, u: float) -> float:
        return 1.0 if self.N + 1 <= state <= 2 * self.N else 0.0

    def fingerprint(self) -> str:
        return f"td_failure(N={self.N},gamma={self.gamma})"


def td_failure_materialized(N: int, gamma: float = 0.5) -> Mrp:
    """Explicit kernel for small N (cross-checks the lazy sampler)."""
    n = 2 * N + 2
    P = np.zeros((n, n))
    for i in range(1, N + 1):
        P[0, i] = gamma / N
        P[i, i] = gamma / 2
        P[i, i + N] = gamma / 2
        P[i + N, 2 * N + 1] = gamma
    P[2 * N + 1, 2 * N + 1] = gamma
    rewards = [RewardModel.deterministic(1.0 if N + 1 <= s <= 2 * N else 0.0)
               for s in range(n)]
    mu = np.zeros(n)
    mu[0] = 1.0
    return Mrp(P, rewards, mu)


def td_failure_mrp(N: int, gamma: float = 0.5, materialize_below: int = 64) -> MrpFamily:
    """The family where TD needs ``n >> sqrt(N)`` but MC does not.

    The true value at the start is ``gamma^2 / (2 - gamma)``; at
    ``gamma = 1/2`` the TD estimate concentrates instead around
    ``2 ln(4/3) - 1/2`` once ``N >> n^2`` (every sampled branch is seen in
    exactly one trajectory).
    """
    lazy = N > materialize_below

    def build():
        return TdFailureLazy(N, gamma) if lazy else td_failure_materialized(N, gamma)

    facts = {
        "target": 0,
        "v_star_s0": gamma ** 2 / (2.0 - gamma),
        "nu_s0": 1.0,
        "h": 1.0 / (1.0 - gamma),
    }
    if gamma == 0.5:
        facts["m0"] = 2.0 * math.log(4.0 / 3.0) - 0.5
    return MrpFamily(name="td_failure", params={"N": N, "gamma": gamma}, build=build,
                     analytic_facts=facts)


# ---------------------------------------------------------------------------
# Two-layer lower-bound family
# ---------------------------------------------------------------------------


def lower_bound_mrp(m: int, N: int, q: float, epsilon: float,
                    psi: Optional[Sequence[int]] = None,
                    zeta: Optional[Sequence[int]] = None) -> MrpFamily:
    """Two-layer family with +-1 second-layer rewards and exit probability q.

    First layer: ``m`` uniform start states with zero reward, each moving
    (with total probability ``q``) to the second-layer states whose sign
    matches its own. Second layer: ``N`` states with reward +-1 of mean
    ``psi_j * epsilon``, then termination. Values: ``V(s_i) = zeta_i q
    epsilon`` and ``V(s'_j) = psi_j epsilon``.
    """
    if m < 1 or N < 1:
        raise ParameterMismatch("need m, N >= 1")
    if N % 2:
        raise ParameterMismatch("N must be even")
    if not 0.0 <= q <= 1.0:
        raise ParameterMismatch("q must lie in [0, 1]")
    if not 0.0 <= epsilon <= 1.0:
        raise ParameterMismatch("epsilon must lie in [0, 1]")
    if psi is None:
        psi = tuple(1 if j % 2 == 0 else -1 for j in range(N))
    psi = tuple(int(x) for x in psi)
    if zeta is None:
        zeta = (1,) * m
    zeta = tuple(int(x) for x in zeta)
    if len(psi) != N or any(x not in (-1, 1) for x in psi):
        raise ParameterMismatch("psi must be a +-1 vector of length N")
    if sum(psi) != 0:
        raise ParameterMismatch("psi must sum to zero")
    if len(zeta) != m or any(x not in (-1, 1) for x in zeta):
        raise ParameterMismatch("zeta must be a +-1 vector of length m")

    n = m + N

    def build() -> Mrp:
        P = np.zeros((n, n))
        for i in range(m):
            for j in range(N):
                if zeta[i] * psi[j] == 1:
                    P[i, m + j] = 2.0 * q / N
        rewards: list[RewardModel] = [RewardModel.deterministic(0.0)] * m
        for j in range(N):
            p_up = (1.0 + psi[j] * epsilon) / 2.0
            rewards.append(RewardModel.discrete([-1.0, 1.0], [1.0 - p_up, p_up]))
        mu = np.zeros(n)
        mu[:m] = 1.0 / m
        return Mrp(P, rewards, mu)

    facts = {
        "target": 0,
        "v_star": [z * q * epsilon for z in zeta] + [p * epsilon for p in psi],
        "v_star_s0": zeta[0] * q * epsilon,
        "h": 2.0,
    }
    return MrpFamily(name="lower_bound",
                     params={"m": m, "N": N, "q": q, "epsilon": epsilon},
                     build=build, analytic_facts=facts)


# ---------------------------------------------------------------------------
# Random-instance generators for the property suites
# ---------------------------------------------------------------------------


def random_mrp(rng: np.random.Generator, n_states: int, min_terminal: float = 0.05,
               edge_prob: float = 0.5, reward_kinds=("deterministic", "uniform", "discrete"),
               max_atoms: int = 3) -> Mrp:
    """Sparse random kernel with terminal mass >= min_terminal per state.

    The uniform terminal floor certifies absorption outright, so no
    rejection is needed. Not derived from any benchmark construction;
    used to fuzz the solvers and estimators.
    """
    n = n_states
    P = np.zeros((n, n))
    for s in range(n):
        mask = rng.random(n) < edge_prob
        if not mask.any():
            mask[rng.integers(n)] = True
        raw = rng.random(n) * mask
        total = raw.sum()
        budget = (1.0 - min_terminal) * rng.random()
        if total > 0:
            P[s] = raw / total * budget
    rewards = [_random_reward(rng, reward_kinds, max_atoms) for _ in range(n)]
    support = rng.integers(1, n + 1)
    mu_raw = np.zeros(n)
    chosen = rng.choice(n, size=support, replace=False)
    mu_raw[chosen] = rng.random(support) + 0.1
    mu = mu_raw / mu_raw.sum()
    return Mrp(P, rewards, mu)


def _random_reward(rng: np.random.Generator, kinds, max_atoms: int) -> RewardModel:
    kind = kinds[rng.integers(len(kinds))]
    if kind == "deterministic":
        return RewardModel.deterministic(rng.uniform(-1, 1))
    if kind == "uniform":
        lo, hi = np.sort(rng.uniform(-1, 1, size=2))
        return RewardModel.uniform(lo, hi)
    n_atoms = int(rng.integers(1, max_atoms + 1))
    values = rng.uniform(-1, 1, size=n_atoms)
    probs = rng.random(n_atoms) + 0.1
    probs = probs / probs.sum()
    # re-normalize exactly so the pmf check holds
    probs[-1] = 1.0 - probs[:-1].sum()
    return RewardModel.discrete(values, probs)


def random_acyclic_mrp(rng: np.random.Generator, n_states: int = 6,
                       max_atoms: int = 3, start_support: int = 2) -> Mrp:
    """Random DAG over at most 6 states (edges strictly forward).

    Rewards are discrete with at most ``max_atoms`` atoms so exhaustive
    path-and-reward enumeration stays exact.
    """
    n = n_states
    P = np.zeros((n, n))
    for s in range(n - 1):
        succ = np.arange(s + 1, n)
        mask = rng.random(len(succ)) < 0.6
        if mask.any():
            raw = rng.random(len(succ)) * mask
            budget = rng.uniform(0.2, 0.95)
            P[s, succ] = raw / raw.sum() * budget
    rewards = [_random_reward(rng, ("deterministic", "discrete"), max_atoms)
               for _ in range(n)]
    support = min(start_support, n)
    mu = np.zeros(n)
    chosen = rng.choice(n - 1 if n > 1 else n, size=min(support, max(n - 1, 1)),
                        replace=False)
    mu[chosen] = rng.random(len(chosen)) + 0.2
    mu = mu / mu.sum()
    return Mrp(P, rewards, mu)


def random_layered_dag(rng: np.random.Generator, n_layers: int = 3, width: int = 3,
                       max_atoms: int = 3) -> tuple[Mrp, tuple]:
    """Layered DAG; returns the MRP and one full layer (a transient subgraph)."""
    layers = [list(range(i * width, (i + 1) * width)) for i in range(n_layers)]
    n = n_layers * width
    P = np.zeros((n, n))
    for li in range(n_layers - 1):
        for s in layers[li]:
            nxt = np.concatenate([layers[lj] for lj in range(li + 1, n_layers)])
            mask = rng.random(len(nxt)) < 0.7
            if mask.any():
                raw = rng.random(len(nxt)) * mask
                budget = rng.uniform(0.3, 0.95)
                P[s, nxt] = raw / raw.sum() * budget
    rewards = [_random_reward(rng, ("deterministic", "discrete", "uniform"), max_atoms)
               for _ in range(n)]
    mu = np.zeros(n)
    mu[layers[0]] = 1.0 / width
    mrp = Mrp(P, rewards, mu)
    pick = int(rng.integers(n_layers))
    reachable = set(mrp.reachable_states().tolist())
    layer = tuple(s for s in layers[pick] if s in reachable) or tuple(
        s for s in layers[0] if s in reachable)
    return mrp, layer


# ---------------------------------------------------------------------------
# Replicate harness
# ---------------------------------------------------------------------------


@dataclass
class ExperimentRecord:
    family: str
    params: str
    estimator: str
    n: int
    replicate: int
    state: int
    error: float
    n_sq_error: float
    runtime_ms: float

    CSV_HEADER = "family,params,estimator,n,replicate,state,error,n_sq_error,runtime_ms"

    def csv_row(self) -> str:
        return (f"{self.family},{self.params},{self.estimator},{self.n},"
                f"{self.replicate},{self.state},{self.error:.12g},"
                f"{self.n_sq_error:.12g},{self.runtime_ms:.3f}")


def _replicate_seed(master_seed: int, n: int, replicate: int) -> int:
    ss = np.random.SeedSequence([int(master_seed), int(n), int(replicate)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _run_estimator(spec: dict, dataset: Dataset, family: MrpFamily):
    from . import estimators, rootsa
    from .covariance import Subgraph

    name = spec["name"]
    if name == "td":
        return estimators.td_estimate(dataset, discount=spec.get("discount"))
    if name == "mc":
        return estimators.mc_estimate(dataset, spec.get("states"))
    subgraph = spec.get("subgraph", "pooling")
    if isinstance(subgraph, str):
        if subgraph == "pooling":
            members = family.analytic_facts["pooling_subgraph"]
        elif subgraph == "sources":
            members = family.analytic_facts["sources"]
        elif subgraph == "all":
            built = family.build()
            members = tuple(range(built.n_states))
        else:
            raise ValueError(f"unknown subgraph spec {subgraph!r}")
    else:
        members = tuple(subgraph)
    G = Subgraph(members)
    if name == "subgraph":
        return estimators.subgraph_estimate(dataset, G)
    if name == "rootsa":
        return rootsa.root_sa_with_restarts(dataset, G, spec.get("config"))
    raise ValueError(f"unknown estimator {name!r}")


def _truth_for(family: MrpFamily, states: Sequence[int]) -> np.ndarray:
    facts = family.analytic_facts
    if "v_star" in facts:
        v = np.asarray(facts["v_star"], dtype=float)
        return v[np.asarray(states)]
    if "v_star_s0" in facts and list(states) == [facts.get("target", 0)]:
        return np.array([facts["v_star_s0"]])
    built = family.build()
    if isinstance(built, Mrp):
        return exact_value(built)[np.asarray(states)]
    raise ValueError("no analytic value available for the requested states")


def run_replicates(family: MrpFamily, estimator_spec: dict, n_grid: Sequence[int],
                   R: int, master_seed: int, max_len: int = 10 ** 6,
                   jobs: int = 1) -> list:
    """Run R replicates of an estimator at each n; one record per state.

    Deterministic given ``master_seed``; each (n, replicate) pair samples
    from its own derived seed, so records do not depend on sweep order and
    replicates may run as a parallel map (``jobs > 1``; records are
    re-sorted before returning). Estimator errors are recorded per
    replicate without aborting the sweep.
    """
    states = list(estimator_spec.get("states") or [family.analytic_facts.get("target", 0)])
    truth = _truth_for(family, states)

    def one(n: int, rep: int) -> list:
        seed = _replicate_seed(master_seed, n, rep)
        mrp = family.build()
        t0 = time.perf_counter()
        try:
            dataset = sample_dataset(mrp, int(n), seed, max_len=max_len)
            result = _run_estimator(estimator_spec, dataset, family)
            est = result.as_vector(states)
            runtime_ms = (time.perf_counter() - t0) * 1e3
            return [ExperimentRecord(
                family=family.name, params=family.params_str(),
                estimator=estimator_spec["name"], n=int(n), replicate=rep,
                state=int(s), error=float(e - v0),
                n_sq_error=float(n) * float(e - v0) ** 2, runtime_ms=runtime_ms)
                for s, e, v0 in zip(states, est, truth)]
        except Exception as exc:  # record the failure, keep sweeping
            runtime_ms = (time.perf_counter() - t0) * 1e3
            return [ExperimentRecord(
                family=family.name, params=family.params_str(),
                estimator=estimator_spec["name"] + f"!{type(exc).__name__}",
                n=int(n), replicate=rep, state=-1, error=float("nan"),
                n_sq_error=float("nan"), runtime_ms=runtime_ms)]

    tasks = [(int(n), rep) for n in n_grid for rep in range(R)]
    records = []
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for batch in pool.map(lambda t: one(*t), tasks):
                records.extend(batch)
    else:
        for n, rep in tasks:
            records.extend(one(n, rep))
    records.sort(key=lambda r: (r.n, r.replicate, r.state))
    return records


def summarize(records: Sequence[ExperimentRecord]) -> list:
    """Group records and report mean n*err^2 with a normal 95% CI."""
    groups: dict = {}
    for rec in records:
        if not np.isfinite(rec.n_sq_error):
            continue
        groups.setdefault((rec.estimator, rec.n, rec.state), []).append(rec.n_sq_error)
    out = []
    for (estimator, n, state), vals in sorted(groups.items()):
        arr = np.asarray(vals)
        mean = float(arr.mean())
        sem = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
        out.append({
            "estimator": estimator, "n": n, "state": state,
            "replicates": len(arr), "mean_n_sq_error": mean,
            "sem": sem, "ci95": [mean - 1.96 * sem, mean + 1.96 * sem],
        })
    return out
