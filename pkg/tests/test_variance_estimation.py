import numpy as np
import pytest

from mrpeval.benchmarks import layered_mrp, random_mrp
from mrpeval.covariance import Subgraph, sigma_subgraph, sigma_td
from mrpeval.errors import ZeroVisits
from mrpeval.mrp_core import Mrp, RewardModel, exact_value
from mrpeval.sampling import Dataset, Trajectory, sample_dataset
from mrpeval.variance_estimation import (
    residual_covariance,
    transition_power_estimate,
    truncated_sandwich,
    variance_estimate,
    variance_estimate_plugin,
)


def make_dataset(traj_specs):
    trajectories = [Trajectory(np.array(s), np.array(r, dtype=float)) for s, r in traj_specs]
    return Dataset.from_trajectories(trajectories)


def deterministic_chain(length=3, reward=0.2):
    P = np.zeros((length, length))
    for i in range(length - 1):
        P[i, i + 1] = 1.0
    return Mrp(P, [RewardModel.deterministic(reward)] * length, np.eye(length)[0])


# ---------------------------------------------------------------------------
# Step II
# ---------------------------------------------------------------------------


def test_powers_deterministic_chain_shift():
    ds = make_dataset([([0, 1, 2], [0.0] * 3)] * 5)
    powers, dropped = transition_power_estimate(ds, Subgraph((0, 1, 2)), 3)
    assert dropped == []
    assert powers[0][0, 1] == 1.0 and powers[0][1, 2] == 1.0
    assert powers[1][0, 2] == 1.0  # the 2-step shift
    assert powers[1][1, :].sum() == 0.0
    assert powers[2].sum() == 0.0  # beyond the longest in-set path


def test_powers_match_exact_matrix_powers():
    rng = np.random.default_rng(0)
    mrp = random_mrp(rng, 5)
    members = tuple(int(s) for s in mrp.reachable_states())
    g = np.asarray(members)
    P_g = mrp.transition[np.ix_(g, g)]
    n = 20_000
    ds = sample_dataset(mrp, n, seed=1)
    powers, _ = transition_power_estimate(ds, Subgraph(members), 3)
    from mrpeval.sampling import empirical_counts

    counts = empirical_counts(ds, subset=members)
    for ell in range(1, 4):
        target = np.linalg.matrix_power(P_g, ell)
        se = np.sqrt(0.25 / np.maximum(counts.N, 1))[:, None]
        assert np.all(np.abs(powers[ell - 1] - target) <= 3 * se + 1e-12)


def test_powers_report_dropped_rows():
    ds = make_dataset([([0], [0.0])] * 3)
    powers, dropped = transition_power_estimate(ds, Subgraph((0, 5)), 2)
    assert dropped == [5]
    assert powers[0][1, :].sum() == 0.0


# ---------------------------------------------------------------------------
# Step III
# ---------------------------------------------------------------------------


def test_residuals_vanish_on_deterministic_mrp():
    mrp = deterministic_chain()
    ds = sample_dataset(mrp, 40, seed=2)
    members = (0, 1, 2)
    V = exact_value(mrp)
    sigma_hat, nu_hat = residual_covariance(ds, Subgraph(members), V[list(members)])
    assert np.abs(sigma_hat).max() <= 1e-24
    assert np.allclose(nu_hat, 1.0, atol=0)


def test_residual_single_trajectory_zero():
    ds = make_dataset([([3], [0.4])])
    sigma_hat, _ = residual_covariance(ds, Subgraph((3,)), np.array([0.4]))
    assert sigma_hat[0, 0] == 0.0


def test_residual_zero_visits_raises():
    ds = make_dataset([([0], [0.0])])
    with pytest.raises(ZeroVisits):
        residual_covariance(ds, Subgraph((0, 1)), np.zeros(2))


def test_residual_covariance_consistent_layered():
    fam = layered_mrp(4, 6)
    mrp = fam.build()
    G = Subgraph(fam.analytic_facts["pooling_subgraph"])
    target = sigma_subgraph(mrp, G).sigma
    V = exact_value(mrp)[list(G.members)]
    n = 40_000
    ds = sample_dataset(mrp, n, seed=3)
    sigma_hat, _ = residual_covariance(ds, G, V)
    # crude per-entry stderr scale for the gate: bounded residual products
    assert np.abs(sigma_hat - target).max() <= 0.25


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def test_pipeline_matches_truncated_exact():
    fam = layered_mrp(4, 6)
    mrp = fam.build()
    G = Subgraph(fam.analytic_facts["pooling_subgraph"])
    rep = sigma_subgraph(mrp, G)
    g = list(G.members)
    P_g = mrp.transition[np.ix_(g, g)]
    L = 9
    # feed exact powers and the exact covariance through the assembly
    acc = np.eye(len(g))
    Pl = np.eye(len(g))
    exact_powers = []
    for _ in range(L):
        Pl = Pl @ P_g
        exact_powers.append(Pl.copy())
    A = np.eye(len(g)) + sum(exact_powers)
    assembled = float((A @ rep.sigma @ A.T)[0, 0])
    assert assembled == pytest.approx(truncated_sandwich(P_g, rep.sigma, L, 0), abs=1e-9)
    # nilpotent chain: the truncated series is already exact
    assert assembled == pytest.approx(rep.sandwiched[0, 0], abs=1e-9)


def test_variance_estimate_deterministic_zero():
    # the target is 0; the only leakage is the squared Step-I pilot error,
    # which shrinks with the data budget
    mrp = deterministic_chain()
    small = variance_estimate(sample_dataset(mrp, 400, seed=4), Subgraph((0, 1, 2)), 0)
    large = variance_estimate(sample_dataset(mrp, 32_000, seed=4), Subgraph((0, 1, 2)), 0)
    assert abs(small.value) <= 0.05
    assert abs(large.value) <= abs(small.value) + 1e-12
    assert abs(large.value) <= 2e-3
    assert small.diagnostics["nonnegative_within_tolerance"]


def test_variance_estimate_layered_accuracy():
    fam = layered_mrp(4, 6)
    ds = sample_dataset(fam.build(), 40_000, seed=5)
    est = variance_estimate(ds, Subgraph(fam.analytic_facts["pooling_subgraph"]), 0)
    assert abs(est.value - 3.0) / 3.0 <= 0.1


def test_variance_estimate_splits_disjoint():
    fam = layered_mrp(3, 4)
    ds = sample_dataset(fam.build(), 4003, seed=6)  # truncates to 4000
    est = variance_estimate(ds, Subgraph(fam.analytic_facts["pooling_subgraph"]), 0)
    spans = est.splits
    assert len(spans) == 4
    assert all(b - a == 1000 for a, b in spans)
    for (a1, b1), (a2, b2) in zip(spans, spans[1:]):
        assert b1 == a2  # contiguous, hence disjoint
    assert est.L >= 1 and est.sigma_hat.shape == (4, 4)


def test_variance_estimate_target_in_subgraph():
    fam = layered_mrp(3, 4)
    ds = sample_dataset(fam.build(), 400, seed=7)
    with pytest.raises(KeyError):
        variance_estimate(ds, Subgraph((0, 3)), 1)


# ---------------------------------------------------------------------------
# plug-in variant
# ---------------------------------------------------------------------------


def test_plugin_deterministic_zero():
    mrp = deterministic_chain()
    ds = sample_dataset(mrp, 200, seed=8)
    est = variance_estimate_plugin(ds, Subgraph((0, 1, 2)), 0)
    assert est.value == pytest.approx(0.0, abs=1e-20)
    assert est.diagnostics["experimental"]


def test_plugin_agrees_with_multistage():
    fam = layered_mrp(4, 6)
    ds = sample_dataset(fam.build(), 80_000, seed=9)
    G = Subgraph(fam.analytic_facts["pooling_subgraph"])
    multi = variance_estimate(ds, G, 0)
    plug = variance_estimate_plugin(ds, G, 0)
    assert abs(plug.value - multi.value) <= 0.15 * 3.0
    assert abs(plug.value - 3.0) / 3.0 <= 0.1


def test_plugin_full_graph_estimates_td_variance():
    rng = np.random.default_rng(10)
    mrp = random_mrp(rng, 5)
    members = tuple(int(s) for s in mrp.reachable_states())
    td = sigma_td(mrp)
    n = 60_000
    ds = sample_dataset(mrp, n, seed=11)
    for s0 in members[:2]:
        plug = variance_estimate_plugin(ds, Subgraph(members), s0)
        target = td.variance_at(s0)
        # replicate-free gate: allow a generous band around the target
        assert abs(plug.value - target) <= 0.2 * max(target, 1.0)
