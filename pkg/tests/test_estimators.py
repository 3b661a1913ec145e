import numpy as np
import pytest
from scipy import sparse

from mrpeval.benchmarks import layered_mrp, random_acyclic_mrp, random_mrp
from mrpeval.covariance import Subgraph
from mrpeval.errors import FixedPointNotContractive
from mrpeval.estimators import (
    mc_estimate,
    solve_empirical_fixed_point,
    subgraph_estimate,
    td_estimate,
)
from mrpeval.mrp_core import exact_value
from mrpeval.sampling import Dataset, Trajectory, sample_dataset


def make_dataset(traj_specs):
    trajectories = [Trajectory(np.array(s), np.array(r, dtype=float)) for s, r in traj_specs]
    return Dataset.from_trajectories(trajectories)


# ---------------------------------------------------------------------------
# solve_empirical_fixed_point
# ---------------------------------------------------------------------------


def test_solver_zero_kernel_returns_b():
    v, info = solve_empirical_fixed_point(np.zeros((3, 3)), np.array([1.0, 2.0, 3.0]))
    assert np.allclose(v, [1, 2, 3], atol=0)
    assert info["residual"] <= 1e-12


def test_solver_scalar_contraction():
    v, _ = solve_empirical_fixed_point(np.array([[0.5]]), np.array([1.0]))
    assert v[0] == pytest.approx(2.0, abs=1e-12)


def test_solver_random_substochastic_residual():
    rng = np.random.default_rng(0)
    for _ in range(10):
        raw = rng.random((10, 10))
        P = raw / raw.sum(axis=1, keepdims=True) * rng.uniform(0.3, 0.99)
        b = rng.normal(size=10)
        v, info = solve_empirical_fixed_point(P, b)
        assert np.abs(v - P @ v - b).max() <= 1e-10
        v2, _ = solve_empirical_fixed_point(sparse.csr_matrix(P), b)
        assert np.allclose(v2, v, atol=1e-9)


def test_solver_rejects_superstochastic():
    with pytest.raises(ValueError):
        solve_empirical_fixed_point(np.array([[1.5]]), np.array([1.0]))


def test_solver_not_contractive():
    P = np.array([[1.0]])  # row-stochastic with no leak: v = v + b diverges
    with pytest.raises(FixedPointNotContractive):
        solve_empirical_fixed_point(P, np.array([1.0]), neumann_cap=200)


# ---------------------------------------------------------------------------
# td_estimate
# ---------------------------------------------------------------------------


def test_td_single_state_mean_reward():
    ds = make_dataset([([4], [0.3])] * 25)
    est = td_estimate(ds)
    assert est.value(4) == pytest.approx(0.3, abs=1e-15)
    assert est.covered == {4}
    assert est.value(0) == 0.0 and 0 not in est.covered


def test_td_layered_sanity():
    mrp = layered_mrp(4, 6).build()
    ds = sample_dataset(mrp, 10_000, seed=1)
    est = td_estimate(ds)
    errors = [abs(est.value(s)) for s in range(mrp.n_states)]
    assert max(errors) <= 0.1


def test_td_discounted_variant_differs_finite_sample():
    # the discounted form trusts gamma instead of the empirical terminal
    # rate, so the two generally differ on finite data
    from mrpeval.benchmarks import td_failure_mrp

    fam = td_failure_mrp(40 * 200 * 200)
    ds = sample_dataset(fam.build(), 200, seed=2)
    absorbing = td_estimate(ds)
    discounted = td_estimate(ds, discount=0.5)
    assert absorbing.value(0) != discounted.value(0)


# ---------------------------------------------------------------------------
# mc_estimate
# ---------------------------------------------------------------------------


def test_mc_single_trajectory():
    ds = make_dataset([([2], [0.7])])
    assert mc_estimate(ds).value(2) == pytest.approx(0.7, abs=0)


def test_mc_two_visit_rollouts():
    # rollouts from the two visits of state 5: {1 + 0, 0} -> mean 0.5
    ds = make_dataset([([5, 5], [1.0, 0.0])])
    assert mc_estimate(ds).value(5) == pytest.approx(0.5, abs=1e-15)


def test_mc_state_restriction_and_unvisited():
    ds = make_dataset([([1, 2], [0.5, 0.25])])
    est = mc_estimate(ds, states=[1, 7])
    assert est.value(1) == pytest.approx(0.75)
    assert est.value(7) == 0.0 and 7 not in est.covered
    assert any("7" in w for w in est.warnings)


# ---------------------------------------------------------------------------
# subgraph_estimate
# ---------------------------------------------------------------------------


def test_subgraph_full_graph_equals_td_bitwise():
    rng = np.random.default_rng(3)
    for trial in range(5):
        mrp = random_mrp(rng, 6)
        ds = sample_dataset(mrp, 800, seed=10 + trial)
        td = td_estimate(ds)
        sub = subgraph_estimate(ds, Subgraph(tuple(int(s) for s in np.unique(ds.states))))
        assert td.values.keys() == sub.values.keys()
        assert all(td.values[k] == sub.values[k] for k in td.values)  # bitwise


def test_subgraph_singleton_equals_mc():
    rng = np.random.default_rng(4)
    for trial in range(5):
        mrp = random_acyclic_mrp(rng, 5)
        ds = sample_dataset(mrp, 600, seed=20 + trial)
        mc = mc_estimate(ds)
        for s in np.unique(ds.states):
            sub = subgraph_estimate(ds, (int(s),))
            assert sub.value(int(s)) == pytest.approx(mc.value(int(s)), abs=1e-12)


def test_subgraph_unvisited_member_warns():
    ds = make_dataset([([0], [0.1])])
    est = subgraph_estimate(ds, (0, 9))
    assert est.value(9) == 0.0 and 9 not in est.covered
    assert any("9" in w for w in est.warnings)


def test_subgraph_layered_pooling_close():
    fam = layered_mrp(4, 6)
    ds = sample_dataset(fam.build(), 10_000, seed=5)
    est = subgraph_estimate(ds, fam.analytic_facts["pooling_subgraph"])
    assert abs(est.value(0)) <= 0.1


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------


def test_estimates_deterministic_given_dataset():
    mrp = layered_mrp(3, 3).build()
    ds = sample_dataset(mrp, 300, seed=6)
    a = td_estimate(ds)
    ds2 = sample_dataset(mrp, 300, seed=6)
    b = td_estimate(ds2)
    assert a.values == b.values
    assert mc_estimate(ds).values == mc_estimate(ds2).values


def test_consistency_slope():
    rng = np.random.default_rng(7)
    mrp = random_mrp(rng, 5)
    V = exact_value(mrp)
    reach = mrp.reachable_states()
    ns = [1000, 10_000, 100_000]
    R = 12
    for estimator in (td_estimate, mc_estimate):
        rmse = []
        for n in ns:
            errs = []
            for rep in range(R):
                ds = sample_dataset(mrp, n, seed=700_000 + 31 * rep + n)
                est = estimator(ds)
                err = max(abs(est.value(int(s)) - V[s]) for s in reach)
                errs.append(err ** 2)
            rmse.append(np.sqrt(np.mean(errs)))
        slope = np.polyfit(np.log(ns), np.log(rmse), 1)[0]
        assert -0.65 <= slope <= -0.35


def test_result_serialization():
    ds = make_dataset([([0, 1], [0.5, -0.5])])
    blob = td_estimate(ds).to_json()
    assert blob["convention"] == "include-current-reward"
    assert set(blob["values"]) == {"0", "1"}
    assert "solver_info" in blob
