"""Sparse precision matrices for the two spatial priors, plus the
factorization machinery (solve, joint Gaussian draw, log-determinant)
the sampler runs on.

The conditional-autoregression structure is Q = D - C on the cardinal
graph: rank m-1 with a flat direction along the constant vector. The
Matern-approximation structure Q(rho) lives on the extended graph with
a = 4 + 1/rho^2 and interior stencil (diag, cardinal, diagonal, 2nd-order
cardinal) = (4 + a^2, -2a, 2, 1). Stencil entries falling outside the
lattice are dropped with the diagonal kept at 4 + a^2; boundary effects
are handled by the buffer ring, not by boundary conditions.

Factorization uses SuperLU in symmetric mode with a caller-supplied
fill-reducing ordering, which for an SPD matrix yields U = diag(U) L^T,
i.e. an LDL^T factorization we can sample through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import splu
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .domain_grid import CARDINAL, DIAGONAL, SECOND_ORDER, NeighborGraph
from .errors import InvalidArgumentError, NumericalError

CAR = "car"
SPDE = "spde"


@dataclass
class PrecisionModel:
    """A spatial prior: structure matrix plus hyperparameters.

    For kind="car" the prior is N(0, sigma2 * Q^-) with Q = D - C
    (generalized inverse; rank m-1). For kind="spde" it is
    N(mu * 1, sigma2 * (4*pi/rho^2) * Q(rho)^-1).

    ``structure``/``structure_rank`` may override the lattice-built
    structure matrix, e.g. a proper 1x1 prior for conjugate test
    fixtures; rank defaults to m-1 for car and m for spde.
    """

    kind: str
    graph: NeighborGraph | None = None
    sigma2: float = 1.0
    rho: float = 1.0
    mu: float = 0.0
    structure: sp.csc_matrix | None = None
    structure_rank: int | None = None

    def __post_init__(self):
        if self.kind not in (CAR, SPDE):
            raise InvalidArgumentError(f"unknown precision model kind {self.kind!r}")
        if self.graph is None and self.structure is None:
            raise InvalidArgumentError("precision model needs a graph or an explicit structure")

    @property
    def n_cells(self) -> int:
        return self.structure.shape[0] if self.structure is not None else self.graph.n_cells

    def structure_matrix(self) -> sp.csc_matrix:
        """Unscaled structure matrix (Q for car, Q(rho) for spde)."""
        if self.structure is not None:
            return self.structure
        if self.kind == CAR:
            return build_car_structure(self.graph)
        return build_spde_structure(self.graph, self.rho)

    def rank(self) -> int:
        if self.structure_rank is not None:
            return self.structure_rank
        m = self.n_cells
        return m - 1 if self.kind == CAR else m


def build_car_structure(graph: NeighborGraph) -> sp.csc_matrix:
    """Q = D - C on the cardinal graph: Q_ii = degree, Q_ik = -1 for neighbors."""
    if graph.order != CARDINAL:
        raise InvalidArgumentError("car structure requires a cardinal-order graph")
    m = graph.n_cells
    e = graph.edges[CARDINAL]
    off = sp.coo_matrix((-np.ones(e.shape[0]), (e[:, 0], e[:, 1])), shape=(m, m))
    deg = graph.degree(CARDINAL).astype(float)
    return (off.tocsc() + sp.diags(deg, format="csc")).tocsc()


def build_spde_structure(graph: NeighborGraph, rho: float) -> sp.csc_matrix:
    """Q(rho) on the extended graph; see module docstring for the stencil."""
    if graph.order != "extended":
        raise InvalidArgumentError("spde structure requires an extended-order graph")
    if rho <= 0:
        raise InvalidArgumentError(f"rho must be > 0, got {rho}")
    a = 4.0 + 1.0 / rho**2
    m = graph.n_cells
    vals = {CARDINAL: -2.0 * a, DIAGONAL: 2.0, SECOND_ORDER: 1.0}
    rows = [np.arange(m)]
    cols = [np.arange(m)]
    data = [np.full(m, 4.0 + a * a)]
    for kind, v in vals.items():
        e = graph.edges[kind]
        rows.append(e[:, 0])
        cols.append(e[:, 1])
        data.append(np.full(e.shape[0], v))
    q = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
    )
    return q.tocsc()


def effective_precision(model: PrecisionModel) -> sp.csc_matrix:
    """Scaled precision Q_p: Q/sigma2 for car, Q(rho) * rho^2/(4*pi*sigma2) for spde."""
    if model.sigma2 <= 0:
        raise InvalidArgumentError(f"sigma2 must be > 0, got {model.sigma2}")
    q = model.structure_matrix()
    if model.kind == CAR:
        return (q / model.sigma2).tocsc()
    scale = model.rho**2 / (4.0 * np.pi * model.sigma2)
    return (q * scale).tocsc()


def generalized_logdet_icar(sigma2: float, m: int, rank: int | None = None) -> float:
    """Log generalized determinant of Q/sigma2, up to the constant
    gdet of the structure matrix (fixed at 0: it cancels in every
    Metropolis ratio because only sigma2 varies within a chain).
    """
    if sigma2 <= 0:
        raise InvalidArgumentError(f"sigma2 must be > 0, got {sigma2}")
    r = (m - 1) if rank is None else rank
    return r * np.log(1.0 / sigma2)


def matern_correlation(d: float, rho: float, nu: float) -> float:
    """Matern correlation at distance d with range rho and smoothness nu.

    Validation-only helper: R(d) = (2 sqrt(nu) d / rho)^nu K_nu(...) /
    (Gamma(nu) 2^(nu-1)), with R(0) = 1 as the limit. nu = 0.5 reduces to
    exp(-sqrt(2) d / rho).
    """
    if d < 0 or rho <= 0 or nu <= 0:
        raise InvalidArgumentError("matern_correlation requires d >= 0, rho > 0, nu > 0")
    if d == 0:
        return 1.0
    x = 2.0 * np.sqrt(nu) * d / rho
    val = x**nu * kv(nu, x) / (gamma_fn(nu) * 2.0 ** (nu - 1.0))
    return float(min(val, 1.0))


@dataclass
class SparseFactor:
    """Opaque handle to an SPD factorization P M P^T = L diag(U) L^T."""

    n: int
    perm: np.ndarray
    lu: object
    sqrt_d: np.ndarray
    _logdet: float

    @property
    def shape(self):
        return (self.n, self.n)


def fill_reducing_permutation(pattern: sp.spmatrix) -> np.ndarray:
    """Bandwidth-reducing ordering for a symmetric sparsity pattern.

    Computed once per pattern and reused across refactorizations; only
    the matrix values change between sampler iterations.
    """
    return np.asarray(reverse_cuthill_mckee(pattern.tocsr(), symmetric_mode=True))


def factorize_prepermuted(mp: sp.csc_matrix, perm: np.ndarray) -> SparseFactor:
    """Factor a matrix whose rows/columns are already in ``perm`` order.

    Low-level entry for callers that maintain the permuted sparsity
    pattern themselves and only refill values between factorizations.
    """
    try:
        lu = splu(
            mp,
            permc_spec="NATURAL",
            diag_pivot_thresh=0.0,
            options=dict(SymmetricMode=True),
        )
    except RuntimeError as exc:
        raise NumericalError(f"sparse factorization failed: {exc}") from exc
    d = lu.U.diagonal()
    bad = np.flatnonzero(d <= 0)
    if bad.size:
        raise NumericalError("matrix is not positive definite", pivot_index=int(bad[0]))
    return SparseFactor(
        n=mp.shape[0], perm=perm, lu=lu, sqrt_d=np.sqrt(d), _logdet=float(np.log(d).sum())
    )


def factorize(matrix: sp.spmatrix, perm: np.ndarray | None = None) -> SparseFactor:
    """Factor a symmetric positive-definite sparse matrix.

    Raises NumericalError (with the offending pivot index) if the matrix
    is singular or indefinite.
    """
    m = matrix.tocsc()
    if perm is None:
        perm = fill_reducing_permutation(m)
    mp = m[perm][:, perm].tocsc()
    return factorize_prepermuted(mp, perm)


def solve(factor: SparseFactor, b: np.ndarray) -> np.ndarray:
    """Solve M x = b through the cached factorization."""
    x = np.empty_like(b, dtype=float)
    x[factor.perm] = factor.lu.solve(np.asarray(b, dtype=float)[factor.perm])
    return x


def logdet(factor: SparseFactor) -> float:
    """log |M| of the factored matrix."""
    return factor._logdet


def sample_gaussian(factor: SparseFactor, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw from N(M^-1 b, M^-1) via perturbation sampling.

    With P M P^T = Lc Lc^T, x = P^T M_p^-1 (P b + Lc z) has the required
    mean and covariance using a single triangular solve pair.
    """
    z = rng.standard_normal(factor.n)
    lcz = factor.lu.L @ (factor.sqrt_d * z)
    x = np.empty(factor.n)
    x[factor.perm] = factor.lu.solve(np.asarray(b, dtype=float)[factor.perm] + lcz)
    return x
