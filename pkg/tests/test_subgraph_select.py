import pytest

from mrpeval.benchmarks import layered_mrp, td_failure_materialized
from mrpeval.covariance import sigma_subgraph
from mrpeval.errors import ZeroVisits
from mrpeval.sampling import sample_dataset
from mrpeval.subgraph_select import (
    candidate_set,
    exact_variance_fn,
    greedy_select,
    multistage_variance_fn,
)


def test_candidate_threshold_above_everything():
    fam = layered_mrp(3, 4)
    ds = sample_dataset(fam.build(), 500, seed=0)
    # n tiny and c1 huge pushes the cut above every occupancy estimate
    assert candidate_set(ds, n=10, c1=10.0, h=4.0) == set()


def test_candidate_threshold_zero_keeps_visited():
    fam = layered_mrp(3, 4)
    mrp = fam.build()
    ds = sample_dataset(mrp, 500, seed=1)
    assert candidate_set(ds, n=500, c1=0.0) == set(range(mrp.n_states))


def test_candidate_large_final_n_keeps_all_states():
    # the cut uses the *final* sample size; occupancies 1/k and 1 clear it
    fam = layered_mrp(4, 6)
    ds = sample_dataset(fam.build(), 5000, seed=2)
    cand = candidate_set(ds, n=10 ** 9, c1=1.0, h=6.0)
    assert cand == set(range(fam.build().n_states))


def test_greedy_oracle_reaches_td_variance():
    fam = layered_mrp(4, 6)
    mrp = fam.build()
    ds = sample_dataset(mrp, 2000, seed=3)
    G, trace = greedy_select(ds, 0, n=2000, variance_fn=exact_variance_fn(mrp, 0), c1=0.0)
    assert 0 in G.members
    final = sigma_subgraph(mrp, G).variance_at(0)
    assert final == pytest.approx(3.0, abs=1e-9)
    assert trace.stop_reason == "no_improvement"
    accepted = trace.accepted_variances()
    assert all(b < a for a, b in zip(accepted, accepted[1:]))  # strict decrease


def test_greedy_constant_objective_stops_immediately():
    fam = layered_mrp(3, 4)
    ds = sample_dataset(fam.build(), 500, seed=4)
    G, trace = greedy_select(ds, 0, n=500, variance_fn=lambda members: 1.0, c1=0.0)
    assert G.members == (0,)
    assert trace.stop_reason == "no_improvement"
    assert len([r for r in trace.rounds if r["accepted"]]) == 0


def test_greedy_candidate_cut_excludes_rare_states():
    # branch states are visited ~ gamma/N of the time; a cut between their
    # occupancy and 1 keeps the target alone, so the estimator stays MC
    N = 50
    mrp = td_failure_materialized(N, gamma=0.5)
    ds = sample_dataset(mrp, 800, seed=5)
    cand = candidate_set(ds, n=800, c1=0.01, h=2.0)
    assert 0 in cand
    assert all(s not in cand for s in range(1, N + 1))
    G, trace = greedy_select(ds, 0, n=800, variance_fn=exact_variance_fn(mrp, 0),
                             c1=0.01, h=2.0)
    assert G.members == (0,)


def test_greedy_budget_flag():
    fam = layered_mrp(4, 6)
    mrp = fam.build()
    ds = sample_dataset(mrp, 1000, seed=6)
    G, trace = greedy_select(ds, 0, n=1000, variance_fn=exact_variance_fn(mrp, 0),
                             c1=0.0, budget=2)
    assert trace.stop_reason == "budget_exceeded"
    assert trace.evaluations == 2
    assert 0 in G.members


def test_greedy_requires_visited_target():
    fam = layered_mrp(2, 2)
    ds = sample_dataset(fam.build(), 100, seed=7)
    with pytest.raises(ZeroVisits):
        greedy_select(ds, 99, n=100, variance_fn=lambda m: 1.0)


def test_greedy_deterministic_tie_break():
    # constant-after-first-improvement objective: both chain states give
    # the same value, the lowest id must win
    fam = layered_mrp(2, 3)
    mrp = fam.build()
    ds = sample_dataset(mrp, 1000, seed=8)

    def fn(members):
        return 1.0 if len(members) == 1 else 0.5

    G, trace = greedy_select(ds, 0, n=1000, variance_fn=fn, c1=0.0)
    first = [r for r in trace.rounds if r["accepted"]][0]
    assert first["chosen"] == min(set(range(mrp.n_states)) - {0})


def test_multistage_variance_fn_smoke():
    fam = layered_mrp(3, 3)
    mrp = fam.build()
    ds = sample_dataset(mrp, 4000, seed=9)
    fn = multistage_variance_fn(ds, 0)
    pooling = tuple(fam.analytic_facts["pooling_subgraph"])
    v_pool = fn(pooling)
    v_single = fn((0,))
    exact_pool = sigma_subgraph(mrp, pooling).variance_at(0)
    exact_single = sigma_subgraph(mrp, (0,)).variance_at(0)
    assert abs(v_pool - exact_pool) / exact_pool <= 0.35
    assert abs(v_single - exact_single) / exact_single <= 0.35
    assert v_pool < v_single  # the pooling subgraph wins, as in truth


def test_trace_serialization():
    fam = layered_mrp(2, 2)
    mrp = fam.build()
    ds = sample_dataset(mrp, 400, seed=10)
    _, trace = greedy_select(ds, 0, n=400, variance_fn=exact_variance_fn(mrp, 0), c1=0.0)
    blob = trace.to_json()
    assert set(blob) == {"candidate_set", "rounds", "stop_reason", "evaluations"}
