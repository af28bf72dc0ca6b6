import itertools

import numpy as np
import pytest
from scipy.optimize import linprog

from tsal.ot import (
    CostMatrix,
    DiscreteMarginal,
    SinkhornConvergenceError,
    SinkhornUnderflowError,
    TransportPlan,
    cost_matrix,
    load_plan_csv,
    save_plan_csv,
    solve_exact,
    solve_sinkhorn,
    standardize_features,
    uniform_marginal,
    validate_plan,
)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def permutation_oracle(C):
    """Exact optimum for square uniform instances: best of all n! matchings."""
    n = C.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(C[i, perm[i]] for i in range(n)) / n
        best = min(best, cost)
    return best


def linprog_oracle(C):
    """LP oracle for rectangular instances (independent solver route)."""
    n_s, n_t = C.shape
    A_eq = []
    for i in range(n_s):
        row = np.zeros(n_s * n_t)
        row[i * n_t:(i + 1) * n_t] = 1.0
        A_eq.append(row)
    for j in range(n_t):
        col = np.zeros(n_s * n_t)
        col[j::n_t] = 1.0
        A_eq.append(col)
    b_eq = [1.0 / n_s] * n_s + [1.0 / n_t] * n_t
    res = linprog(C.ravel(), A_eq=np.array(A_eq), b_eq=np.array(b_eq),
                  bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun


# ---------------------------------------------------------------------------
# Cost matrices
# ---------------------------------------------------------------------------

class TestCostMatrix:
    def test_identical_single_point_is_zero(self):
        C = cost_matrix(np.array([[1.0, 2.0]]), np.array([[1.0, 2.0]]))
        assert C.values[0, 0] == 0.0

    def test_3_4_5(self):
        C = cost_matrix(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]))
        assert C.values[0, 0] == pytest.approx(5.0, abs=1e-12)

    def test_elementwise_oracle_random(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(10, 5))
        B = rng.normal(size=(12, 5))
        C = cost_matrix(A, B).values
        for i in range(10):
            for j in range(12):
                assert C[i, j] == pytest.approx(
                    float(np.linalg.norm(A[i] - B[j])), abs=1e-10
                )

    def test_squared_metric(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(4, 3))
        B = rng.normal(size=(6, 3))
        C2 = cost_matrix(A, B, "squared_euclidean").values
        C1 = cost_matrix(A, B, "euclidean").values
        np.testing.assert_allclose(C2, C1 ** 2, atol=1e-9)

    def test_transpose_symmetry_exact(self):
        rng = np.random.default_rng(2)
        A = rng.normal(size=(9, 7))
        B = rng.normal(size=(11, 7))
        np.testing.assert_array_equal(
            cost_matrix(A, B).values.T, cost_matrix(B, A).values
        )

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="align"):
            cost_matrix(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_bad_metric(self):
        with pytest.raises(ValueError, match="metric"):
            cost_matrix(np.zeros((1, 1)), np.zeros((1, 1)), "manhattan")


class TestStandardize:
    def test_source_stats_applied_to_both(self):
        rng = np.random.default_rng(3)
        src = rng.normal(loc=5.0, scale=3.0, size=(40, 4))
        tgt = rng.normal(loc=1.0, scale=2.0, size=(30, 4))
        zs, zt = standardize_features(src, tgt)
        np.testing.assert_allclose(zs.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(zs.std(axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(zt, (tgt - src.mean(0)) / src.std(0), atol=1e-12)

    def test_disabled_passthrough(self):
        src = np.ones((3, 2))
        tgt = np.zeros((2, 2))
        zs, zt = standardize_features(src, tgt, enabled=False)
        np.testing.assert_array_equal(zs, src)
        np.testing.assert_array_equal(zt, tgt)

    def test_constant_dimension_left_unscaled(self):
        src = np.tile([2.0, 1.0], (5, 1))
        src[:, 1] = [0.0, 1.0, 2.0, 3.0, 4.0]
        tgt = np.array([[7.0, 2.0]])
        zs, zt = standardize_features(src, tgt)
        assert np.all(np.isfinite(zs)) and np.all(np.isfinite(zt))
        assert zt[0, 0] == pytest.approx(5.0)  # centered, not divided


# ---------------------------------------------------------------------------
# Exact solver
# ---------------------------------------------------------------------------

class TestSolveExact:
    def test_single_atom(self):
        plan = solve_exact(uniform_marginal(1), uniform_marginal(1),
                           CostMatrix(np.array([[3.5]]), "euclidean"))
        assert plan.links == ((0, 0, 1.0),)
        assert plan.cost == pytest.approx(3.5)

    def test_two_by_two_diagonal(self):
        C = CostMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]), "euclidean")
        plan = solve_exact(uniform_marginal(2), uniform_marginal(2), C)
        assert plan.cost == pytest.approx(0.0, abs=1e-12)
        dense = plan.to_dense()
        np.testing.assert_allclose(dense, np.eye(2) * 0.5, atol=1e-12)

    def test_matches_permutation_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(60):
            n = int(rng.integers(2, 7))
            C = rng.uniform(0.0, 10.0, size=(n, n))
            plan = solve_exact(uniform_marginal(n), uniform_marginal(n),
                               CostMatrix(C, "euclidean"))
            assert plan.cost == pytest.approx(permutation_oracle(C), abs=1e-9)

    def test_rectangular_matches_linprog(self):
        rng = np.random.default_rng(6)
        for _ in range(15):
            n_s = int(rng.integers(2, 7))
            n_t = int(rng.integers(2, 9))
            C = rng.uniform(0.0, 5.0, size=(n_s, n_t))
            plan = solve_exact(uniform_marginal(n_s), uniform_marginal(n_t),
                               CostMatrix(C, "euclidean"))
            assert plan.cost == pytest.approx(linprog_oracle(C), abs=1e-9)

    def test_vertex_sparsity_and_marginals(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n_s = int(rng.integers(2, 12))
            n_t = int(rng.integers(2, 12))
            C = rng.uniform(size=(n_s, n_t))
            mu_s, mu_t = uniform_marginal(n_s), uniform_marginal(n_t)
            plan = solve_exact(mu_s, mu_t, CostMatrix(C, "euclidean"))
            assert len(plan.links) <= n_s + n_t - 1
            report = validate_plan(plan, mu_s, mu_t)
            assert report.passed, report

    def test_scale_equivariance(self):
        rng = np.random.default_rng(8)
        C = rng.uniform(0.5, 3.0, size=(5, 6))
        mu_s, mu_t = uniform_marginal(5), uniform_marginal(6)
        p1 = solve_exact(mu_s, mu_t, CostMatrix(C, "euclidean"))
        p2 = solve_exact(mu_s, mu_t, CostMatrix(7.0 * C, "euclidean"))
        assert p2.cost == pytest.approx(7.0 * p1.cost, rel=1e-12)
        assert {(i, j) for i, j, _ in p1.links} == {(i, j) for i, j, _ in p2.links}

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(9)
        C = rng.uniform(size=(5, 7))
        mu_s, mu_t = uniform_marginal(5), uniform_marginal(7)
        perm = rng.permutation(7)
        p1 = solve_exact(mu_s, mu_t, CostMatrix(C, "euclidean")).to_dense()
        p2 = solve_exact(mu_s, mu_t, CostMatrix(C[:, perm], "euclidean")).to_dense()
        np.testing.assert_allclose(p2, p1[:, perm], atol=1e-12)

    def test_degenerate_costs_terminate(self):
        # All-equal costs maximize ties and degenerate pivots.
        C = CostMatrix(np.ones((6, 6)), "euclidean")
        plan = solve_exact(uniform_marginal(6), uniform_marginal(6), C)
        assert plan.cost == pytest.approx(1.0)
        assert validate_plan(plan, uniform_marginal(6), uniform_marginal(6)).passed

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            solve_exact(uniform_marginal(2), uniform_marginal(2),
                        CostMatrix(np.zeros((2, 3)), "euclidean"))

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        C = CostMatrix(rng.uniform(size=(8, 8)), "euclidean")
        mu = uniform_marginal(8)
        assert solve_exact(mu, mu, C).links == solve_exact(mu, mu, C).links


# ---------------------------------------------------------------------------
# Sinkhorn solver
# ---------------------------------------------------------------------------

class TestSinkhorn:
    def test_single_atom_any_eps(self):
        C = CostMatrix(np.array([[2.0]]), "euclidean")
        for eps in (10.0, 1.0, 1e-3):
            plan = solve_sinkhorn(uniform_marginal(1), uniform_marginal(1), C, eps=eps)
            assert plan.links == ((0, 0, pytest.approx(1.0, abs=1e-9)),)

    def test_two_by_two_concentrates_on_diagonal(self):
        C = CostMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]), "euclidean")
        plan = solve_sinkhorn(uniform_marginal(2), uniform_marginal(2), C, eps=1e-3)
        dense = plan.to_dense()
        assert dense[0, 1] < 0.01 and dense[1, 0] < 0.01
        assert plan.cost < 0.01

    def test_cost_within_2pct_of_exact(self):
        rng = np.random.default_rng(11)
        mu = uniform_marginal(6)
        for _ in range(20):
            C = rng.uniform(0.1, 4.0, size=(6, 6))
            eps = 1e-3 * float(np.median(C))
            exact = solve_exact(mu, mu, CostMatrix(C, "euclidean"))
            approx = solve_sinkhorn(mu, mu, CostMatrix(C, "euclidean"), eps=eps)
            assert approx.cost <= exact.cost * 1.02 + 1e-12
            assert approx.cost >= exact.cost * 0.98 - 1e-12

    def test_sparsified_marginals_within_1e6(self):
        rng = np.random.default_rng(12)
        for n_s, n_t in [(5, 9), (12, 7), (20, 20)]:
            C = CostMatrix(rng.uniform(0.2, 3.0, size=(n_s, n_t)), "euclidean")
            mu_s, mu_t = uniform_marginal(n_s), uniform_marginal(n_t)
            plan = solve_sinkhorn(mu_s, mu_t, C, eps=0.05)
            report = validate_plan(plan, mu_s, mu_t)
            assert report.passed, report

    def test_underflow_error_mentions_log_domain(self):
        C = CostMatrix(np.array([[0.0, 900.0], [900.0, 0.0]]), "euclidean")
        with pytest.raises(SinkhornUnderflowError, match="log"):
            solve_sinkhorn(uniform_marginal(2), uniform_marginal(2), C,
                           eps=1e-4, log_domain="never")

    def test_nonconvergence_carries_violation(self):
        rng = np.random.default_rng(13)
        C = CostMatrix(rng.uniform(1.0, 2.0, size=(8, 8)), "euclidean")
        with pytest.raises(SinkhornConvergenceError) as exc:
            solve_sinkhorn(uniform_marginal(8), uniform_marginal(8), C,
                           eps=1e-4, max_iter=2, tol=1e-12)
        assert exc.value.violation > 0

    def test_large_eps_without_log_domain(self):
        rng = np.random.default_rng(14)
        C = CostMatrix(rng.uniform(0.5, 1.5, size=(6, 6)), "euclidean")
        mu = uniform_marginal(6)
        plan = solve_sinkhorn(mu, mu, C, eps=float(np.median(C.values)),
                              log_domain="never", eps_scaling=False)
        assert validate_plan(plan, mu, mu).passed

    def test_cold_start_cost_trace_nonincreasing(self):
        # Single-level runs sample the transport cost from the first sweep on;
        # the solver itself fails the run on any rise above 1e-8.
        rng = np.random.default_rng(21)
        for _ in range(10):
            C = CostMatrix(rng.uniform(0.2, 2.0, size=(7, 7)), "euclidean")
            mu = uniform_marginal(7)
            plan = solve_sinkhorn(mu, mu, C, eps=0.5 * float(np.median(C.values)),
                                  eps_scaling=False)
            trace = np.array(plan.cost_trace)
            assert trace.size >= 3
            # converged tail: only numerical noise left
            assert np.all(np.diff(trace[-3:]) <= 1e-6)

    def test_annealed_run_has_converged_tail_trace(self):
        rng = np.random.default_rng(22)
        C = CostMatrix(rng.uniform(0.2, 2.0, size=(9, 9)), "euclidean")
        mu = uniform_marginal(9)
        plan = solve_sinkhorn(mu, mu, C, eps=1e-3 * float(np.median(C.values)))
        assert len(plan.cost_trace) >= 3  # near-feasible samples plus converged tail

    def test_rejects_bad_inputs(self):
        C = CostMatrix(np.zeros((2, 2)), "euclidean")
        mu = uniform_marginal(2)
        with pytest.raises(ValueError):
            solve_sinkhorn(mu, mu, C, eps=-1.0)
        with pytest.raises(ValueError):
            solve_sinkhorn(mu, mu, C, eps=1.0, log_domain="sometimes")


# ---------------------------------------------------------------------------
# Plan type, validation, persistence
# ---------------------------------------------------------------------------

class TestPlanType:
    def test_exact_tag_enforces_vertex_bound(self):
        links = tuple((0, j, 0.25) for j in range(4))
        TransportPlan(links=links, n_s=1, n_t=4, solver_tag="exact", cost=0.0)
        too_many = tuple((i, j, 1.0 / 9) for i in range(3) for j in range(3))
        with pytest.raises(ValueError, match="vertex"):
            TransportPlan(links=too_many, n_s=3, n_t=3, solver_tag="exact", cost=0.0)

    def test_nonpositive_mass_rejected(self):
        with pytest.raises(ValueError, match="mass"):
            TransportPlan(links=((0, 0, 0.0),), n_s=1, n_t=1, solver_tag="exact", cost=0.0)

    def test_doubled_entry_fails_validation(self):
        mu = uniform_marginal(2)
        plan = TransportPlan(
            links=((0, 0, 1.0), (1, 1, 0.5)), n_s=2, n_t=2,
            solver_tag="sinkhorn(0.1)", cost=0.0,
        )
        report = validate_plan(plan, mu, mu)
        assert not report.passed
        assert report.max_row_violation == pytest.approx(0.5)

    def test_marginal_type_enforces_uniformity(self):
        with pytest.raises(ValueError, match="equal"):
            DiscreteMarginal(n=2, weights=np.array([0.7, 0.3]))
        with pytest.raises(ValueError):
            uniform_marginal(0)

    def test_plan_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(15)
        C = CostMatrix(rng.uniform(size=(4, 5)), "euclidean")
        plan = solve_exact(uniform_marginal(4), uniform_marginal(5), C)
        p = tmp_path / "plan.csv"
        save_plan_csv(plan, p)
        back = load_plan_csv(p, n_s=4, n_t=5)
        assert back.links == plan.links
