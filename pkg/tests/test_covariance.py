import itertools

import numpy as np
import pytest

from mrpeval.benchmarks import (
    layered_mrp,
    random_acyclic_mrp,
    random_layered_dag,
    random_mrp,
    td_failure_materialized,
)
from mrpeval.covariance import (
    CovarianceReport,
    check_transient,
    exit_diagnostics,
    refined_diagonal_oracle,
    sigma_mc,
    sigma_subgraph,
    sigma_subgraph_transient,
    sigma_td,
)
from mrpeval.errors import NotTransient, ZeroOccupancy
from mrpeval.mrp_core import Mrp, RewardModel, exact_occupancy, exact_value, one_step_variance
from mrpeval.sampling import sample_dataset
from mrpeval.estimators import td_estimate

from _oracles import BruteForce


def deterministic_chain(length=2):
    P = np.zeros((length, length))
    for i in range(length - 1):
        P[i, i + 1] = 1.0
    return Mrp(P, [RewardModel.deterministic(0.3)] * length, np.eye(length)[0])


def loop_with_exit(p_loop=0.4, p_exit=0.4):
    """s0 self-loops, sometimes exits to s1 which can re-enter s0."""
    P = np.array([
        [p_loop, p_exit],
        [0.5, 0.0],
    ])
    rewards = [RewardModel.uniform(-1, 1), RewardModel.discrete([-0.5, 1.0], [0.5, 0.5])]
    return Mrp(P, rewards, [1.0, 0.0])


# ---------------------------------------------------------------------------
# sigma_td
# ---------------------------------------------------------------------------


def test_td_layered_value():
    mrp = layered_mrp(4, 6).build()
    assert sigma_td(mrp).variance_at(0) == pytest.approx(3.0, abs=1e-9)


def test_td_deterministic_rewards_zero():
    rep = sigma_td(deterministic_chain(3))
    assert np.abs(rep.sandwiched).max() == 0.0
    assert np.abs(rep.lambda_).max() == 0.0


def test_td_scalar_matrix_agreement():
    rng = np.random.default_rng(0)
    for _ in range(10):
        rep = sigma_td(random_mrp(rng, 6))
        assert np.allclose(rep.diagnostics["scalar_variances"],
                           np.diag(rep.sandwiched), atol=1e-9)


def test_td_matches_replicate_simulation():
    rng = np.random.default_rng(1)
    mrp = random_mrp(rng, 5)
    rep = sigma_td(mrp)
    V = exact_value(mrp)
    n, R = 4000, 250
    errs = {int(s): [] for s in rep.states}
    for r in range(R):
        ds = sample_dataset(mrp, n, seed=31000 + r)
        est = td_estimate(ds)
        for s in rep.states:
            errs[int(s)].append(est.value(s) - V[s])
    for s in rep.states:
        scaled = n * np.asarray(errs[int(s)]) ** 2
        se = scaled.std(ddof=1) / np.sqrt(R)
        assert abs(scaled.mean() - rep.variance_at(s)) <= 3 * se


def test_td_zero_occupancy_error():
    P = np.zeros((2, 2))
    mrp = Mrp(P, [RewardModel.deterministic(0.0)] * 2, [1.0, 0.0])
    with pytest.raises(ZeroOccupancy):
        sigma_td(mrp, states=[1])


# ---------------------------------------------------------------------------
# sigma_mc
# ---------------------------------------------------------------------------


def test_mc_layered_value():
    mrp = layered_mrp(4, 6).build()
    assert sigma_mc(mrp).variance_at(0) == pytest.approx(8.0, abs=1e-9)


def test_mc_deterministic_chain_zero():
    rep = sigma_mc(deterministic_chain(2))
    assert np.abs(rep.sigma).max() == 0.0


def test_mc_transient_singleton_closed_form():
    rng = np.random.default_rng(2)
    for _ in range(10):
        mrp = random_mrp(rng, 5)
        rep = sigma_mc(mrp)
        V = exact_value(mrp)
        w = np.linalg.solve(np.eye(5) - mrp.transition, one_step_variance(mrp, V))
        nu = exact_occupancy(mrp)
        for s in rep.states:
            if check_transient(mrp, (int(s),)) and mrp.transition[s, s] == 0:
                assert rep.variance_at(s) == pytest.approx(w[s] / nu[s], rel=1e-9)


def test_mc_dp_and_sim_methods():
    rng = np.random.default_rng(3)
    mrp = random_mrp(rng, 6)
    exact = sigma_mc(mrp)
    dp = sigma_mc(mrp, method="dp", tail_tol=1e-12)
    assert dp.method["name"] == "truncated_dp"
    assert dp.method["tail_bound"] <= 1e-10
    assert np.allclose(dp.sigma, exact.sigma, atol=1e-8)
    sim = sigma_mc(mrp, method="mc", n_sim=100_000, seed=4)
    dev = np.abs(sim.lambda_ - exact.lambda_)
    se = np.maximum(sim.diagnostics["stderr"], 1e-12)
    assert (dev / se).max() <= 4.5  # entrywise, with a multiplicity margin


# ---------------------------------------------------------------------------
# sigma_subgraph
# ---------------------------------------------------------------------------


def test_subgraph_equals_td_at_full_graph():
    rng = np.random.default_rng(5)
    for _ in range(10):
        mrp = random_mrp(rng, 6)
        td = sigma_td(mrp)
        sub = sigma_subgraph(mrp, td.states)
        assert np.allclose(sub.sigma, td.sigma, atol=1e-8)
        assert np.allclose(sub.sandwiched, td.sandwiched, atol=1e-8)
        assert np.abs(sub.components["sigma_y"]).max() <= 1e-12


def test_subgraph_layered_pooling_and_sources():
    fam = layered_mrp(4, 6)
    mrp = fam.build()
    pooling = sigma_subgraph(mrp, fam.analytic_facts["pooling_subgraph"])
    assert pooling.variance_at(0) == pytest.approx(3.0, abs=1e-9)
    # bootstrapping on the start states alone is exactly MC: kT/3, not
    # the TD value (the construction pools only through the chain)
    sources = sigma_subgraph(mrp, fam.analytic_facts["sources"])
    assert sources.variance_at(0) == pytest.approx(8.0, abs=1e-9)


def test_subgraph_brute_force_small():
    rng = np.random.default_rng(6)
    for _ in range(5):
        mrp = random_acyclic_mrp(rng, 5)
        bf = BruteForce(mrp)
        reach = [int(s) for s in bf.reachable]
        supp = sorted(int(s) for s in np.flatnonzero(mrp.initial > 0))
        others = [s for s in reach if s not in supp]
        for r in range(len(others) + 1):
            for extra in itertools.combinations(others, r):
                members = tuple(sorted(set(supp) | set(extra)))
                rep = sigma_subgraph(mrp, members)
                want = bf.sigma_subgraph(members)
                assert np.abs(rep.lambda_ - want["lambda"]).max() <= 1e-8
                assert np.abs(rep.sandwiched - want["sandwiched"]).max() <= 1e-8


def test_subgraph_dp_method():
    rng = np.random.default_rng(7)
    mrp = random_mrp(rng, 6)
    members = tuple(int(s) for s in mrp.reachable_states())[:3]
    exact = sigma_subgraph(mrp, members)
    dp = sigma_subgraph(mrp, members, method="dp", tail_tol=1e-12)
    assert np.allclose(dp.sandwiched, exact.sandwiched, atol=1e-8)


def test_subgraph_sim_method():
    rng = np.random.default_rng(8)
    mrp = random_mrp(rng, 5)
    members = tuple(int(s) for s in mrp.reachable_states())[:3]
    exact = sigma_subgraph(mrp, members)
    sim = sigma_subgraph(mrp, members, method="mc", n_sim=150_000, seed=9)
    dev = np.abs(sim.lambda_ - exact.lambda_)
    se = np.maximum(sim.diagnostics["stderr"], 1e-12)
    assert (dev / se).max() <= 4.5


def test_subgraph_zero_occupancy():
    P = np.zeros((2, 2))
    mrp = Mrp(P, [RewardModel.deterministic(0.0)] * 2, [1.0, 0.0])
    with pytest.raises(ZeroOccupancy):
        sigma_subgraph(mrp, (0, 1))


def test_dp_truncation_budget_exceeded():
    from mrpeval.errors import TruncationBudgetExceeded

    # decay so slow that no horizon under the power cap meets the tolerance
    mrp = Mrp([[0.9995]], [RewardModel.uniform(-1, 1)], [1.0])
    with pytest.raises(TruncationBudgetExceeded):
        sigma_mc(mrp, method="dp", tail_tol=1e-10)


# ---------------------------------------------------------------------------
# PSD domination and component bounds
# ---------------------------------------------------------------------------


def test_psd_domination_and_component_bound():
    rng = np.random.default_rng(10)
    instances = []
    for _ in range(8):
        mrp = random_mrp(rng, 5)
        members = tuple(int(s) for s in mrp.reachable_states())
        instances.append((mrp, members))
        instances.append((mrp, members[: max(1, len(members) // 2)]))
    for mrp, members in instances:
        rep = sigma_subgraph(mrp, members)
        lam_x = rep.components["lambda_x"]
        lam_y = rep.components["lambda_y"]
        dom = 2 * lam_x + 2 * lam_y - rep.lambda_
        trace = max(np.trace(rep.lambda_), 1e-300)
        assert np.linalg.eigvalsh((dom + dom.T) / 2).min() >= -1e-8 * trace
        # componentwise lower bound on the diagonal
        assert np.all(np.diag(lam_x) + np.diag(lam_y) <= np.diag(rep.lambda_) + 1e-10)


# ---------------------------------------------------------------------------
# transient subgraphs
# ---------------------------------------------------------------------------


def test_check_transient_examples():
    fam = layered_mrp(4, 6)
    mrp = fam.build()
    assert check_transient(mrp, fam.analytic_facts["sources"])
    assert check_transient(mrp, tuple(range(mrp.n_states)))  # only exit is terminal
    loop = loop_with_exit()
    assert not check_transient(loop, (0,))  # exits to s1 which re-enters


def test_transient_layered_sources():
    k, T = 4, 6
    fam = layered_mrp(k, T)
    mrp = fam.build()
    rep = sigma_subgraph_transient(mrp, fam.analytic_facts["sources"])
    assert np.allclose(np.diag(rep.sigma), k * (1.0 / 3.0 + (T - 1) / 3.0), atol=1e-9)
    # bootstrap-only subgraph: sandwich equals the diagonal (kT/3 = the MC
    # value); the TD-matching (k+T-1)/3 belongs to the pooling subgraph
    assert rep.variance_at(0) == pytest.approx(k * T / 3.0, abs=1e-9)
    pool = sigma_subgraph_transient(mrp, fam.analytic_facts["pooling_subgraph"])
    assert pool.variance_at(0) == pytest.approx((k + T - 1) / 3.0, abs=1e-9)


def test_transient_no_exits_equals_sigma_x():
    rng = np.random.default_rng(11)
    mrp = random_mrp(rng, 5)
    members = tuple(int(s) for s in mrp.reachable_states())
    rep = sigma_subgraph_transient(mrp, members)
    sub = sigma_subgraph(mrp, members)
    assert np.allclose(rep.sigma, sub.components["sigma_x"], atol=1e-10)


def test_transient_equivalence_on_dags():
    rng = np.random.default_rng(12)
    for _ in range(10):
        mrp, layer = random_layered_dag(rng)
        assert check_transient(mrp, layer)
        a = sigma_subgraph_transient(mrp, layer)
        b = sigma_subgraph(mrp, layer)
        assert np.abs(a.sigma - b.sigma).max() <= 1e-8
        assert np.abs(a.sandwiched - b.sandwiched).max() <= 1e-8


def test_not_transient_raises():
    with pytest.raises(NotTransient):
        sigma_subgraph_transient(loop_with_exit(), (0,))


# ---------------------------------------------------------------------------
# exit diagnostics
# ---------------------------------------------------------------------------


def test_exit_diagnostics_full_graph():
    rng = np.random.default_rng(13)
    mrp = random_mrp(rng, 5)
    members = tuple(int(s) for s in mrp.reachable_states())
    rows = exit_diagnostics(mrp, members)
    for row in rows:
        term = 1.0 - mrp.transition[row["state"]].sum()
        assert row["exit_prob"] == pytest.approx(term, abs=1e-12)
        assert row["exit_prob_nonterminal"] == pytest.approx(0.0, abs=1e-12)


def test_exit_diagnostics_layered_sources():
    k = 4
    fam = layered_mrp(k, 6)
    rows = exit_diagnostics(fam.build(), fam.analytic_facts["sources"])
    for row in rows:
        assert row["exit_prob"] == pytest.approx(1.0, abs=1e-12)
        assert row["exit_over_nu"] == pytest.approx(k, abs=1e-9)


def test_exit_diagnostics_td_failure():
    mrp = td_failure_materialized(8, gamma=0.5)
    (row,) = exit_diagnostics(mrp, (0,))
    assert row["nu"] == pytest.approx(1.0, abs=1e-12)
    # live-exit mass is gamma; counting the terminal branch makes it 1
    assert row["exit_prob_nonterminal"] == pytest.approx(0.5, abs=1e-12)
    assert row["exit_prob"] == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# refined diagonal oracle
# ---------------------------------------------------------------------------


def test_refined_diagonal_transient_reduces_to_exit_form():
    fam = layered_mrp(3, 4)
    mrp = fam.build()
    G = fam.analytic_facts["sources"]
    est = refined_diagonal_oracle(mrp, G, 0, n_sim=60_000, seed=14)
    # exits happen at most once: the loop polynomials vanish
    assert est.moments["E_loop_s2_poly"] == 0.0
    assert est.moments["E_loop_nu_poly"] == 0.0
    target = sigma_subgraph(mrp, G).lambda_[0, 0]
    assert est.agrees_with(target)


def test_refined_diagonal_loop_mrp():
    mrp = loop_with_exit()
    G = (0,)
    est = refined_diagonal_oracle(mrp, G, 0, n_sim=300_000, seed=15)
    target = sigma_subgraph(mrp, G).lambda_[0, 0]
    assert est.stderr > 0
    assert est.agrees_with(target)
    assert est.moments["E_loop_s2_poly"] > 0  # genuine multi-exit loops


def test_refined_diagonal_deterministic_zero():
    mrp = deterministic_chain(3)
    est = refined_diagonal_oracle(mrp, (0, 1), 0, n_sim=5_000, seed=16)
    assert est.value == pytest.approx(0.0, abs=1e-12)
    assert est.stderr == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# report plumbing
# ---------------------------------------------------------------------------


def test_report_serialization_and_psd_guard():
    mrp = layered_mrp(2, 3).build()
    rep = sigma_subgraph(mrp, (0, 2))
    blob = rep.to_json()
    assert blob["states"] == [0, 2]
    assert blob["method"]["name"] == "exact"
    assert len(blob["lambda"]) == 2
    with pytest.raises(Exception):
        CovarianceReport(states=(0,), lambda_=np.array([[-1.0]]),
                         sigma=np.array([[-1.0]]), sandwiched=np.array([[-1.0]]),
                         method={"name": "exact"})
