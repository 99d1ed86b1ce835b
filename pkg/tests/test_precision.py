import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcomp.domain_grid import CARDINAL, build_grid, build_neighbor_graph
from gridcomp.errors import InvalidArgumentError, NumericalError
from gridcomp.precision import (
    PrecisionModel,
    build_car_structure,
    build_spde_structure,
    effective_precision,
    factorize,
    generalized_logdet_icar,
    logdet,
    matern_correlation,
    sample_gaussian,
    solve,
)


def car_q(nx, ny):
    return build_car_structure(build_neighbor_graph(build_grid(nx, ny, 0), CARDINAL))


def spde_q(nx, ny, rho):
    return build_spde_structure(build_neighbor_graph(build_grid(nx, ny, 0), "extended"), rho)


class TestCarStructure:
    def test_1x2(self):
        q = car_q(2, 1).toarray()
        assert np.array_equal(q, [[1.0, -1.0], [-1.0, 1.0]])

    def test_2x2(self):
        q = car_q(2, 2).toarray()
        assert np.array_equal(np.diag(q), [2.0, 2.0, 2.0, 2.0])
        assert np.all((q + np.diag([3, 3, 3, 3])).sum(axis=1) >= 0)
        for row in q:
            assert np.sum(row == -1.0) == 2

    def test_3x3_center_row(self):
        q = car_q(3, 3).toarray()
        center = 4
        assert q[center, center] == 4.0
        assert np.sum(q[center] == -1.0) == 4
        assert q[center].sum() == 0.0

    def test_zero_row_sums_exact_and_symmetry(self):
        q = car_q(7, 5)
        assert np.all(np.asarray(q.sum(axis=1)).ravel() == 0.0)
        assert (q != q.T).nnz == 0

    def test_rank_deficiency_one(self):
        q = car_q(5, 4).toarray()
        evals = np.linalg.eigvalsh(q)
        assert abs(evals[0]) < 1e-10
        assert evals[1] > 0

    def test_extended_graph_rejected(self):
        graph = build_neighbor_graph(build_grid(3, 3, 0), "extended")
        with pytest.raises(InvalidArgumentError):
            build_car_structure(graph)


class TestSpdeStructure:
    def test_rho_one_stencil_values(self):
        # a = 4 + 1 = 5: diagonal 29, cardinal -10, diagonal-neighbor 2, 2nd-order 1
        q = spde_q(5, 5, 1.0).toarray()
        center = 12
        assert q[center, center] == 29.0
        assert q[center, center + 1] == -10.0
        assert q[center, center + 6] == 2.0  # (+1, +1) neighbor
        assert q[center, center + 2] == 1.0
        assert (spde_q(5, 5, 1.0) != spde_q(5, 5, 1.0).T).nnz == 0

    def test_large_rho_limit(self):
        # a -> 4: diagonal -> 20, cardinal -> -8
        q = spde_q(5, 5, 1e9).toarray()
        center = 12
        assert abs(q[center, center] - 20.0) < 1e-8
        assert abs(q[center, center + 1] + 8.0) < 1e-8

    def test_positive_definite_6x6(self):
        for rho in (0.05, 0.7, 13.0):
            evals = np.linalg.eigvalsh(spde_q(6, 6, rho).toarray())
            assert evals[0] > 0

    @pytest.mark.parametrize("rho", [0.1, 1.0, 10.0, float(np.exp(5.0))])
    def test_positive_definite_up_to_10x10(self, rho):
        evals = np.linalg.eigvalsh(spde_q(10, 10, rho).toarray())
        assert evals[0] > 0

    def test_invalid_args(self):
        graph = build_neighbor_graph(build_grid(3, 3, 0), CARDINAL)
        with pytest.raises(InvalidArgumentError):
            build_spde_structure(graph, 1.0)
        graph_ext = build_neighbor_graph(build_grid(3, 3, 0), "extended")
        with pytest.raises(InvalidArgumentError):
            build_spde_structure(graph_ext, 0.0)


class TestEffectivePrecision:
    def test_car_unit_sigma_identity(self):
        grid = build_grid(2, 1, 0)
        graph = build_neighbor_graph(grid, CARDINAL)
        model = PrecisionModel(kind="car", graph=graph, sigma2=1.0)
        assert np.array_equal(effective_precision(model).toarray(), car_q(2, 1).toarray())

    def test_car_scalar_scaling(self):
        grid = build_grid(2, 1, 0)
        graph = build_neighbor_graph(grid, CARDINAL)
        model = PrecisionModel(kind="car", graph=graph, sigma2=4.0)
        assert np.array_equal(
            effective_precision(model).toarray(), [[0.25, -0.25], [-0.25, 0.25]]
        )

    def test_spde_scaling(self):
        grid = build_grid(5, 5, 0)
        graph = build_neighbor_graph(grid, "extended")
        model = PrecisionModel(kind="spde", graph=graph, sigma2=1.0, rho=1.0)
        qp = effective_precision(model).toarray()
        assert abs(qp[12, 12] - 29.0 / (4.0 * np.pi)) < 1e-12
        assert abs(qp[12, 12] - 2.3077) < 5e-4

    def test_sigma_validation(self):
        grid = build_grid(2, 1, 0)
        graph = build_neighbor_graph(grid, CARDINAL)
        with pytest.raises(InvalidArgumentError):
            effective_precision(PrecisionModel(kind="car", graph=graph, sigma2=0.0))

    @settings(max_examples=20, deadline=None)
    @given(c=st.floats(0.1, 100.0))
    def test_scaling_is_exact(self, c):
        grid = build_grid(3, 3, 0)
        graph = build_neighbor_graph(grid, CARDINAL)
        base = effective_precision(PrecisionModel(kind="car", graph=graph, sigma2=1.0))
        scaled = effective_precision(PrecisionModel(kind="car", graph=graph, sigma2=c))
        assert np.allclose(scaled.toarray() * c, base.toarray(), rtol=0, atol=1e-15)


class TestFactorization:
    def test_identity_solve(self):
        f = factorize(sp.identity(3, format="csc"))
        assert np.array_equal(solve(f, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])

    def test_logdet_diag(self):
        f = factorize(sp.diags([2.0, 2.0], format="csc"))
        assert abs(logdet(f) - 2.0 * np.log(2.0)) < 1e-12

    def test_logdet_vs_dense_oracle(self):
        q = car_q(5, 5)
        m = (q + sp.identity(25, format="csc")).tocsc()
        dense = np.linalg.slogdet(m.toarray())[1]
        f = factorize(m)
        assert abs(logdet(f) - dense) <= 1e-8 * abs(dense)

    def test_solve_residual(self):
        rng = np.random.default_rng(0)
        q = car_q(6, 4)
        m = (q + sp.diags(rng.uniform(0.5, 2.0, 24))).tocsc()
        b = rng.standard_normal(24)
        x = solve(factorize(m), b)
        assert np.abs(m @ x - b).max() <= 1e-8 * np.abs(b).max()

    def test_non_pd_raises_with_pivot(self):
        m = sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(NumericalError) as err:
            factorize(m)
        assert err.value.pivot_index is not None

    def test_singular_raises(self):
        with pytest.raises(NumericalError):
            factorize(car_q(2, 1))

    def test_sample_gaussian_moments(self):
        # empirical covariance over 1e5 draws within 3 MC standard errors
        rng = np.random.default_rng(42)
        m_dense = np.array([[2.0, -0.5, 0.0], [-0.5, 1.5, -0.3], [0.0, -0.3, 1.0]])
        m = sp.csc_matrix(m_dense)
        f = factorize(m)
        b = np.array([0.4, -1.0, 2.0])
        n = 100_000
        draws = np.stack([sample_gaussian(f, b, rng) for _ in range(n)])
        cov_true = np.linalg.inv(m_dense)
        mean_true = cov_true @ b
        se_mean = np.sqrt(np.diag(cov_true) / n)
        assert np.all(np.abs(draws.mean(axis=0) - mean_true) < 3 * se_mean)
        centered = draws - draws.mean(axis=0)
        cov_emp = centered.T @ centered / (n - 1)
        se_cov = np.sqrt(
            (np.outer(np.diag(cov_true), np.diag(cov_true)) + cov_true**2) / n
        )
        assert np.all(np.abs(cov_emp - cov_true) < 3 * se_cov)


class TestGeneralizedLogdet:
    def test_unit_sigma_is_zero(self):
        assert generalized_logdet_icar(1.0, 25) == 0.0

    def test_sigma_e(self):
        assert abs(generalized_logdet_icar(np.e, 10) - (-9.0)) < 1e-12

    def test_ratio_matches_dense_pseudo_determinant(self):
        q = car_q(3, 3).toarray()
        evals = np.linalg.eigvalsh(q)
        nonzero = evals[evals > 1e-10]

        def dense_gdet(sigma2):
            return float(np.log(nonzero / sigma2).sum())

        ours = generalized_logdet_icar(1.0, 9) - generalized_logdet_icar(4.0, 9)
        oracle = dense_gdet(1.0) - dense_gdet(4.0)
        assert abs(ours - oracle) < 1e-10

    def test_invalid_sigma(self):
        with pytest.raises(InvalidArgumentError):
            generalized_logdet_icar(-1.0, 5)


class TestMaternCorrelation:
    def test_zero_distance(self):
        assert matern_correlation(0.0, 2.0, 1.0) == 1.0

    def test_exponential_special_case(self):
        # nu = 1/2 reduces to exp(-sqrt(2) d / rho)
        for d, rho in [(0.5, 1.0), (2.0, 3.0), (10.0, 4.0)]:
            expected = np.exp(-np.sqrt(2.0) * d / rho)
            assert abs(matern_correlation(d, rho, 0.5) - expected) < 1e-10

    def test_limit_at_large_distance(self):
        assert matern_correlation(500.0, 1.0, 1.0) < 1e-12

    def test_monotone_decreasing(self):
        grid_d = np.linspace(0.01, 20.0, 60)
        vals = [matern_correlation(d, 3.0, 1.0) for d in grid_d]
        assert np.all(np.diff(vals) < 0)

    def test_invalid_args(self):
        for bad in [(-1.0, 1.0, 1.0), (1.0, 0.0, 1.0), (1.0, 1.0, 0.0)]:
            with pytest.raises(InvalidArgumentError):
                matern_correlation(*bad)
