"""MCMC engine: truncated-normal latent updates, joint Gaussian field
draws, cross-level hyperparameter moves with adaptive proposals, and
township membership resampling.

One sweep is: update latent tree normals -> resample township
memberships -> refresh sufficient statistics -> per-taxon joint
hyperparameter move (Metropolis on the field-marginalized density)
followed by one unconditional Gibbs draw of the field. Retained
iterations stream through the Monte Carlo proportion estimator so
latent-field histories never need to be stored.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr, ndtri

from . import estimator as est
from . import precision as prec
from .domain_grid import CARDINAL, GridSpec, build_neighbor_graph
from .errors import ConfigError, InvalidArgumentError, NumericalError
from .model_core import Dataset, Hyperpriors, LatentState, TownshipTrees

# Proposals below this sigma are auto-rejected: the prior mass there is
# negligible and 1/sigma^2 would overflow the precision scaling.
_SIGMA_FLOOR = 1e-8

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Truncated normal draws, stable in far tails
# ---------------------------------------------------------------------------


def _std_trunc_lower(rng, a, size=None):
    """Z ~ N(0,1) conditioned on Z > a, via complementary-CDF inversion.

    Works directly in the upper tail so bounds many standard deviations
    out stay exact; rejection sampling is never used.
    """
    a = np.asarray(a, dtype=float)
    shape = a.shape if size is None else size
    u = rng.random(shape)
    tail = (1.0 - u) * ndtr(-a)
    z = -ndtri(np.fmax(tail, 1e-320))
    # enforce the open bound exactly (ties are possible after rounding)
    return np.maximum(z, np.nextafter(a, np.inf))


def truncnorm_lower(rng, lower, mean=0.0, size=None):
    """Draws from N(mean, 1) truncated below at ``lower``."""
    lower = np.asarray(lower, dtype=float)
    mean = np.asarray(mean, dtype=float)
    return mean + _std_trunc_lower(rng, lower - mean, size=size)


def truncnorm_upper(rng, upper, mean=0.0, size=None):
    """Draws from N(mean, 1) truncated above at ``upper``."""
    upper = np.asarray(upper, dtype=float)
    mean = np.asarray(mean, dtype=float)
    return mean - _std_trunc_lower(rng, mean - upper, size=size)


# ---------------------------------------------------------------------------
# Configuration and per-chain state
# ---------------------------------------------------------------------------


@dataclass
class SamplerConfig:
    """Chain schedule, proposal targets, and prior bounds."""

    n_iter: int = 150_000
    burn_in: int = 25_000
    n_retained: int = 250
    seed: int = 0
    adapt_interval: int = 50
    target_accept_1d: float = 0.44
    target_accept_2d: float = 0.234
    hyperpriors: Hyperpriors = field(default_factory=Hyperpriors)
    model_kind: str = prec.CAR
    t_mc: int = est.DEFAULT_MC_DRAWS
    store_alpha: bool = False

    def __post_init__(self):
        if self.model_kind not in (prec.CAR, prec.SPDE):
            raise ConfigError(f"unknown model kind {self.model_kind!r}")
        if self.burn_in < 0 or self.n_iter <= self.burn_in:
            raise ConfigError(f"need 0 <= burn_in < n_iter, got {self.burn_in}, {self.n_iter}")
        span = self.n_iter - self.burn_in
        if self.n_retained < 1 or span % self.n_retained != 0:
            raise ConfigError(
                f"n_retained={self.n_retained} must divide n_iter - burn_in = {span} evenly"
            )
        if self.adapt_interval < 1:
            raise ConfigError("adapt_interval must be >= 1")
        if self.t_mc < 1:
            raise ConfigError("t_mc must be >= 1")

    @property
    def thin(self) -> int:
        return (self.n_iter - self.burn_in) // self.n_retained

    def retained_iterations(self) -> np.ndarray:
        """Evenly spaced 1-based iteration indices in (burn_in, n_iter]."""
        return self.burn_in + self.thin * np.arange(1, self.n_retained + 1)

    def fingerprint(self) -> str:
        payload = json.dumps(
            [
                self.n_iter,
                self.burn_in,
                self.n_retained,
                self.seed,
                self.adapt_interval,
                self.model_kind,
                self.t_mc,
            ]
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class AdaptiveProposal:
    """Random-walk scale (and 2-D shape) adapted toward a target rate.

    The log-scale moves by batch_number**-0.5 * (rate - target) once per
    adaptation batch, so adjustments diminish over time; adaptation is
    frozen at the end of burn-in. 2-D blocks additionally track running
    moments of the sampled block to shape the proposal covariance.
    """

    dim: int
    target: float
    log_scale: float
    attempts: int = 0
    accepts: int = 0
    batches: int = 0
    frozen: bool = False
    count: int = 0
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None

    def __post_init__(self):
        if self.dim == 2 and self.mean is None:
            self.mean = np.zeros(2)
            self.m2 = np.zeros((2, 2))

    def propose(self, rng, phi):
        step = np.exp(self.log_scale)
        if self.dim == 1:
            return phi + step * rng.standard_normal()
        cov = self.shape_matrix()
        chol = np.linalg.cholesky(cov)
        return phi + step * (chol @ rng.standard_normal(2))

    def shape_matrix(self):
        if self.count >= 20:
            c = self.m2 / (self.count - 1)
            return c + 1e-9 * np.eye(2)
        return 0.01 * np.eye(2)

    def record_sample(self, phi):
        if self.dim != 2 or self.frozen:
            return
        self.count += 1
        delta = phi - self.mean
        self.mean += delta / self.count
        self.m2 += np.outer(delta, phi - self.mean)

    def register(self, accepted: bool):
        self.attempts += 1
        self.accepts += int(accepted)

    def maybe_adapt(self, interval: int):
        if self.frozen or self.attempts < interval:
            return
        rate = self.accepts / self.attempts
        self.batches += 1
        self.log_scale += self.batches**-0.5 * (rate - self.target)
        self.attempts = 0
        self.accepts = 0


@dataclass
class SufficientStats:
    """Per-cell tree counts and latent-normal means under the current
    tree placement; recomputed whenever memberships or W change."""

    a_diag: np.ndarray  # (m,) tree count per cell
    wbar: np.ndarray  # (m, P), zero where a_diag == 0


def compute_sufficient_stats(state: LatentState, n_cells: int) -> SufficientStats:
    counts = np.bincount(state.tree_cell, minlength=n_cells).astype(float)
    p = state.w.shape[1]
    wbar = np.zeros((n_cells, p))
    for j in range(p):
        wbar[:, j] = np.bincount(state.tree_cell, weights=state.w[:, j], minlength=n_cells)
    nz = counts > 0
    wbar[nz] /= counts[nz, None]
    return SufficientStats(a_diag=counts, wbar=wbar)


# ---------------------------------------------------------------------------
# Latent updates
# ---------------------------------------------------------------------------


def update_W(state: LatentState, rng: np.random.Generator) -> None:
    """Resample every tree's latent normals from their truncated
    conditionals: the observed taxon first against the running maximum
    of the others, then the rest below the fresh observed value."""
    w = state.w
    n, p = w.shape
    if n == 0:
        return
    alpha_tree = state.alpha[state.tree_cell]
    if p == 1:
        w[:, 0] = alpha_tree[:, 0] + rng.standard_normal(n)
        return
    rows = np.arange(n)
    taxon = state.tree_taxon
    masked = w.copy()
    masked[rows, taxon] = -np.inf
    lower = masked.max(axis=1)
    w[rows, taxon] = truncnorm_lower(rng, lower, alpha_tree[rows, taxon])
    upper = w[rows, taxon]
    for j in range(p):
        sel = taxon != j
        if sel.any():
            w[sel, j] = truncnorm_upper(rng, upper[sel], alpha_tree[sel, j])


def membership_probabilities(w_tree, alpha, cells, weights):
    """Posterior cell probabilities for one township tree: prior overlap
    weights reweighted by the unit-variance normal likelihood of the
    tree's latent vector at each candidate cell."""
    a_sup = alpha[cells]
    loglik = -0.5 * np.sum((w_tree[None, :] - a_sup) ** 2, axis=1)
    logw = loglik + np.log(weights)
    logw -= logw.max()
    pw = np.exp(logw)
    return pw / pw.sum()


def update_memberships(state: LatentState, townships: TownshipTrees, rng) -> None:
    """Redraw the latent cell of every township tree from its discrete
    posterior over the township's support cells."""
    pos = state.n_gridded
    for overlap, labels in zip(townships.overlaps, townships.taxon_labels):
        nt = labels.size
        wt = state.w[pos : pos + nt]
        a_sup = state.alpha[overlap.cells]
        loglik = wt @ a_sup.T - 0.5 * np.sum(a_sup * a_sup, axis=1)[None, :]
        logw = loglik + np.log(overlap.weights)[None, :]
        logw -= logw.max(axis=1, keepdims=True)
        pw = np.exp(logw)
        norm = pw.sum(axis=1)
        bad = ~np.isfinite(norm) | (norm <= 0)
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise NumericalError(
                f"membership weights degenerate for tree {j} of township "
                f"{overlap.township_id}"
            )
        cdf = np.cumsum(pw / norm[:, None], axis=1)
        u = rng.random((nt, 1))
        choice = np.minimum((cdf < u).sum(axis=1), overlap.cells.size - 1)
        state.tree_cell[pos : pos + nt] = overlap.cells[choice]
        pos += nt


# ---------------------------------------------------------------------------
# Field conditional and marginalized hyperparameter density
# ---------------------------------------------------------------------------


class _ModelFamily:
    """Per-run cache for one spatial prior on a fixed lattice.

    The sparsity pattern of A + Q_p never changes within a chain, so the
    permuted CSC skeleton (fill-reducing order applied) is built once
    and refactorizations only refill the value array: Q entries are
    either fixed (car: structure / sigma^2) or a four-value lookup by
    stencil class (spde), plus the tree counts on the diagonal slots.
    """

    def __init__(self, kind, grid: GridSpec, structure_override=None):
        self.kind = kind
        self.grid = grid
        m = grid.n_cells
        self.n_cells = m
        diag = np.arange(m)
        if structure_override is not None:
            structure, self.rank = structure_override
            self.structure = structure.tocsc()
            self.graph = None
            coo = self.structure.tocoo()
            rows, cols, base = coo.row, coo.col, coo.data.astype(float)
            present = np.zeros(m, dtype=bool)
            present[rows[rows == cols]] = True
            missing = np.flatnonzero(~present)
            rows = np.concatenate([rows, missing])
            cols = np.concatenate([cols, missing])
            base = np.concatenate([base, np.zeros(missing.size)])
            codes = None
        elif kind == prec.CAR:
            self.graph = build_neighbor_graph(grid, CARDINAL)
            self.structure = prec.build_car_structure(self.graph)
            self.rank = m - 1
            e = self.graph.edges[CARDINAL]
            rows = np.concatenate([e[:, 0], diag])
            cols = np.concatenate([e[:, 1], diag])
            base = np.concatenate(
                [-np.ones(e.shape[0]), self.graph.degree(CARDINAL).astype(float)]
            )
            codes = None
        else:
            self.graph = build_neighbor_graph(grid, "extended")
            self.structure = None
            self.rank = m
            rows, cols = [diag], [diag]
            code_list = [np.zeros(m, dtype=np.int8)]
            for code, key in ((1, CARDINAL), (2, "diagonal"), (3, "second_order")):
                e = self.graph.edges[key]
                rows.append(e[:, 0])
                cols.append(e[:, 1])
                code_list.append(np.full(e.shape[0], code, dtype=np.int8))
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
            codes = np.concatenate(code_list)
            base = None
            self.class_degree = np.stack(
                [self.graph.degree(k).astype(float) for k in (CARDINAL, "diagonal", "second_order")]
            )
        pattern = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(m, m)).tocsc()
        self.perm = prec.fill_reducing_permutation(pattern)
        inv = np.empty(m, dtype=np.int64)
        inv[self.perm] = diag
        tagged = sp.coo_matrix(
            (np.arange(1.0, rows.size + 1.0), (inv[rows], inv[cols])), shape=(m, m)
        ).tocsc()
        if tagged.nnz != rows.size:
            raise NumericalError("duplicate entries in the structure matrix")
        slot = np.rint(tagged.data - 1.0).astype(np.int64)
        self.indices = tagged.indices
        self.indptr = tagged.indptr
        self.base_slotted = base[slot] if base is not None else None
        self.codes_slotted = codes[slot] if codes is not None else None
        dslots = np.empty(m, dtype=np.int64)
        for j in range(m):
            lo, hi = self.indptr[j], self.indptr[j + 1]
            dslots[j] = lo + np.searchsorted(self.indices[lo:hi], j)
        self.diag_slots = dslots

    def q_scale(self, sigma2, rho=1.0) -> float:
        if self.kind == prec.CAR or self.structure is not None:
            return 1.0 / sigma2
        return rho**2 / (4.0 * np.pi * sigma2)

    def _q_values(self, rho):
        """Permuted-slot values of the unscaled structure matrix."""
        if self.base_slotted is not None:
            return self.base_slotted
        a = 4.0 + 1.0 / rho**2
        lut = np.array([4.0 + a * a, -2.0 * a, 2.0, 1.0])
        return lut[self.codes_slotted]

    def _permuted(self, data) -> sp.csc_matrix:
        m = self.n_cells
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(m, m), copy=False)

    def conditional_factor(self, sigma2, a_diag, rho=1.0) -> prec.SparseFactor:
        """Factor of A + Q_p at the given hyperparameters."""
        data = self._q_values(rho) * self.q_scale(sigma2, rho)
        data[self.diag_slots] += a_diag[self.perm]
        try:
            return prec.factorize_prepermuted(self._permuted(data), self.perm)
        except NumericalError as exc:
            if self.kind == prec.CAR and self.rank < self.n_cells:
                raise NumericalError(
                    "car field conditional is singular: the intrinsic prior needs "
                    "at least one cell with data"
                ) from exc
            raise

    def structure_logdet(self, rho) -> float:
        """logdet of the unscaled spde structure matrix Q(rho)."""
        data = self._q_values(rho).copy()
        return prec.logdet(prec.factorize_prepermuted(self._permuted(data), self.perm))

    def qp_rowsum(self, sigma2, rho) -> np.ndarray:
        """Row sums of the scaled spde precision, Q_p @ 1."""
        a = 4.0 + 1.0 / rho**2
        deg = self.class_degree
        unscaled = (4.0 + a * a) - 2.0 * a * deg[0] + 2.0 * deg[1] + deg[2]
        return unscaled * self.q_scale(sigma2, rho)


@dataclass
class _TaxonState:
    """Current hyperparameters and cached factorizations for one taxon."""

    sigma2: float
    mu: float = 0.0
    rho: float = 10.0
    factor: prec.SparseFactor | None = None  # factor of A + Q_p
    structure_logdet: float | None = None  # logdet of Q(rho), spde only
    qp_rowsum: np.ndarray | None = None  # Q_p @ 1, spde only


def _marginal_car(family, sigma2, a_diag, wbar_p, factor=None):
    """Marginal log density of the latent normals given log sigma, up to
    terms constant in the hyperparameter."""
    if factor is None:
        factor = family.conditional_factor(sigma2, a_diag)
    b = a_diag * wbar_p
    val = (
        0.5 * prec.generalized_logdet_icar(sigma2, family.n_cells, rank=family.rank)
        - 0.5 * prec.logdet(factor)
        + 0.5 * float(b @ prec.solve(factor, b))
    )
    return val, factor, b


def _marginal_spde(family, sigma2, mu, rho, a_diag, wbar_p, factor=None, structure_logdet=None):
    scale = family.q_scale(sigma2, rho)
    if structure_logdet is None:
        structure_logdet = family.structure_logdet(rho)
    rowsum = family.qp_rowsum(sigma2, rho)
    if factor is None:
        factor = family.conditional_factor(sigma2, a_diag, rho)
    b = a_diag * wbar_p + mu * rowsum
    logdet_qp = family.n_cells * np.log(scale) + structure_logdet
    val = (
        0.5 * logdet_qp
        - 0.5 * prec.logdet(factor)
        + 0.5 * float(b @ prec.solve(factor, b))
        - 0.5 * mu**2 * float(rowsum.sum())
    )
    return val, factor, b, structure_logdet, rowsum


def marginal_logdensity_W(model: prec.PrecisionModel, stats: SufficientStats, taxon: int) -> float:
    """Field-marginalized log density of the taxon's latent normals as a
    function of the hyperparameters, up to an additive constant.

    Generic (non-cached) evaluation used for validation; the chain keeps
    factorizations alive through _ModelFamily instead.
    """
    q_p = prec.effective_precision(model)
    m = q_p.shape[0]
    conditional = (q_p + sp.diags(stats.a_diag, format="csc")).tocsc()
    try:
        factor = prec.factorize(conditional)
    except NumericalError as exc:
        if model.kind == prec.CAR:
            raise NumericalError(
                "car field conditional is singular: the intrinsic prior needs "
                "at least one cell with data"
            ) from exc
        raise
    b = stats.a_diag * stats.wbar[:, taxon]
    if model.kind == prec.CAR:
        lg = prec.generalized_logdet_icar(model.sigma2, m, rank=model.rank())
        quad_const = 0.0
    else:
        lg = prec.logdet(prec.factorize(q_p))
        rowsum = np.asarray(q_p @ np.ones(m)).ravel()
        b = b + model.mu * rowsum
        quad_const = model.mu**2 * float(rowsum.sum())
    return (
        0.5 * lg
        - 0.5 * prec.logdet(factor)
        + 0.5 * float(b @ prec.solve(factor, b))
        - 0.5 * quad_const
    )


def alpha_conditional(model: prec.PrecisionModel, stats: SufficientStats, taxon: int):
    """(mean, factor) of the Gaussian full conditional of one taxon's
    field: N((A + Q_p)^-1 b, (A + Q_p)^-1) with b = A wbar (+ Q_p mu 1)."""
    q_p = prec.effective_precision(model)
    m = (q_p + sp.diags(stats.a_diag, format="csc")).tocsc()
    try:
        factor = prec.factorize(m)
    except NumericalError as exc:
        if model.kind == prec.CAR:
            raise NumericalError(
                "car field conditional is singular: the intrinsic prior needs "
                "at least one cell with data"
            ) from exc
        raise
    b = stats.a_diag * stats.wbar[:, taxon]
    if model.kind == prec.SPDE and model.mu != 0.0:
        b = b + model.mu * np.asarray(q_p @ np.ones(q_p.shape[0])).ravel()
    return prec.solve(factor, b), factor, b


def gibbs_alpha(model: prec.PrecisionModel, stats: SufficientStats, taxon: int, rng) -> np.ndarray:
    """One exact joint draw of a taxon's field from its full conditional."""
    _, factor, b = alpha_conditional(model, stats, taxon)
    return prec.sample_gaussian(factor, b, rng)


# ---------------------------------------------------------------------------
# Cross-level joint hyperparameter updates
# ---------------------------------------------------------------------------


def _mh_accept(rng, log_ratio: float) -> bool:
    if log_ratio >= 0:
        return True
    return np.log(rng.random()) < log_ratio


def _update_hyper_car(family, ts, stats, wbar_p, hp, prop, rng):
    """Joint (log sigma, field) move for the intrinsic model; the field
    draw itself is deferred to the trailing Gibbs step."""
    cur_val, cur_factor, _ = _marginal_car(family, ts.sigma2, stats.a_diag, wbar_p, ts.factor)
    ts.factor = cur_factor
    phi = 0.5 * np.log(ts.sigma2)
    phi_star = prop.propose(rng, phi)
    sigma_star = np.exp(phi_star)
    accepted = False
    if _SIGMA_FLOOR < sigma_star <= hp.sigma_upper:
        star_val, star_factor, _ = _marginal_car(family, sigma_star**2, stats.a_diag, wbar_p)
        log_ratio = (star_val + phi_star) - (cur_val + phi)
        if _mh_accept(rng, log_ratio):
            ts.sigma2 = float(sigma_star**2)
            ts.factor = star_factor
            accepted = True
    prop.register(accepted)
    return accepted


def _update_hyper_spde_mu(family, ts, stats, wbar_p, hp, prop, rng):
    """Location move: Q_p is unchanged, so log determinants cancel and
    the cached factorization is reused."""
    factor = ts.factor
    rowsum = ts.qp_rowsum
    qsum = float(rowsum.sum())
    aw = stats.a_diag * wbar_p

    def part(mu):
        b = aw + mu * rowsum
        return 0.5 * float(b @ prec.solve(factor, b)) - 0.5 * mu**2 * qsum

    mu_star = prop.propose(rng, ts.mu)
    accepted = False
    if abs(mu_star) <= hp.mu_bound:
        if _mh_accept(rng, part(mu_star) - part(ts.mu)):
            ts.mu = float(mu_star)
            accepted = True
    prop.register(accepted)
    return accepted


def _update_hyper_spde_range(family, ts, stats, wbar_p, hp, prop, rng):
    """Joint (log sigma, log rho) move with a bivariate adapted proposal."""
    cur_val, cur_factor, _, cur_sld, cur_rowsum = _marginal_spde(
        family, ts.sigma2, ts.mu, ts.rho, stats.a_diag, wbar_p, ts.factor, ts.structure_logdet
    )
    ts.factor = cur_factor
    ts.structure_logdet = cur_sld
    ts.qp_rowsum = cur_rowsum
    phi = np.array([0.5 * np.log(ts.sigma2), np.log(ts.rho)])
    phi_star = prop.propose(rng, phi)
    sigma_star, rho_star = np.exp(phi_star)
    accepted = False
    if _SIGMA_FLOOR < sigma_star <= hp.sigma_upper and hp.rho_lower < rho_star < hp.rho_upper:
        star_val, star_factor, _, star_sld, star_rowsum = _marginal_spde(
            family, sigma_star**2, ts.mu, rho_star, stats.a_diag, wbar_p
        )
        log_ratio = (star_val + phi_star.sum()) - (cur_val + phi.sum())
        if _mh_accept(rng, log_ratio):
            ts.sigma2 = float(sigma_star**2)
            ts.rho = float(rho_star)
            ts.factor = star_factor
            ts.structure_logdet = star_sld
            ts.qp_rowsum = star_rowsum
            accepted = True
    prop.register(accepted)
    prop.record_sample(np.array([0.5 * np.log(ts.sigma2), np.log(ts.rho)]))
    return accepted

# ---------------------------------------------------------------------------
# Chain driver
# ---------------------------------------------------------------------------


@dataclass
class ChainDiagnostics:
    """Post-run acceptance rates, hyperparameter traces, and ESS."""

    acceptance: dict
    sigma2_trace: np.ndarray  # (K, P)
    mu_trace: np.ndarray | None
    rho_trace: np.ndarray | None
    theta_ess: np.ndarray | None  # (m_core, P)
    membership_freq: list | None  # per township: (n_support_cells,) post-burn
    elapsed_s: float
    alpha_samples: np.ndarray | None = None  # (K, m, P) if store_alpha


def _expand_gridded_trees(dataset: Dataset):
    counts = dataset.cell_counts.counts
    cell_idx, taxon_idx = np.nonzero(counts)
    reps = counts[cell_idx, taxon_idx]
    return np.repeat(cell_idx, reps), np.repeat(taxon_idx, reps)


def _init_township_cells(townships: TownshipTrees, rng):
    cells, taxa, town_of_tree = [], [], []
    for t, (ov, labels) in enumerate(zip(townships.overlaps, townships.taxon_labels)):
        nt = labels.size
        cdf = np.cumsum(ov.weights)
        pick = np.minimum((cdf[None, :] < rng.random((nt, 1))).sum(axis=1), ov.cells.size - 1)
        cells.append(ov.cells[pick])
        taxa.append(np.asarray(labels, dtype=np.int64))
        town_of_tree.append(np.full(nt, t))
    return np.concatenate(cells), np.concatenate(taxa), np.concatenate(town_of_tree)


def _init_state(dataset: Dataset, rng) -> LatentState:
    grid = dataset.grid
    p = dataset.taxa.n_taxa
    g_cell, g_taxon = _expand_gridded_trees(dataset)
    if dataset.townships is not None:
        t_cell, t_taxon, town_of_tree = _init_township_cells(dataset.townships, rng)
        cell = np.concatenate([g_cell, t_cell])
        taxon = np.concatenate([g_taxon, t_taxon])
    else:
        cell, taxon, town_of_tree = g_cell, g_taxon, None
    n = cell.size
    alpha = np.zeros((grid.n_cells, p))
    state = LatentState(
        alpha=alpha,
        w=np.zeros((n, p)),
        tree_cell=cell.astype(np.int64),
        tree_taxon=taxon.astype(np.int64),
        n_gridded=g_cell.size,
        extras={"town_of_tree": town_of_tree},
    )
    if n:
        # draw once from the truncated conditionals given the initial field
        state.w[:] = alpha[cell] + rng.standard_normal((n, p))
        update_W(state, rng)
    return state


class _Chain:
    """Mutable chain runtime shared by run_chain and checkpointing."""

    def __init__(self, dataset: Dataset, config: SamplerConfig, structure_override=None):
        self.dataset = dataset
        self.config = config
        self.grid = dataset.grid
        self.p = dataset.taxa.n_taxa
        self.family = _ModelFamily(config.model_kind, self.grid, structure_override)
        self.rng = np.random.default_rng(config.seed)
        self.state = _init_state(dataset, self.rng)
        self.stats = compute_sufficient_stats(self.state, self.grid.n_cells)
        hp = config.hyperpriors
        self.hp = hp
        self.taxon_states = [_TaxonState(sigma2=1.0, mu=0.0, rho=10.0) for _ in range(self.p)]
        self.proposals = self._init_proposals()
        self.iteration = 0
        k = config.n_retained
        core = self.grid.n_core_cells
        self.theta = np.zeros((k, core, self.p))
        self.sigma2_trace = np.zeros((k, self.p))
        self.mu_trace = np.zeros((k, self.p)) if config.model_kind == prec.SPDE else None
        self.rho_trace = np.zeros((k, self.p)) if config.model_kind == prec.SPDE else None
        self.alpha_samples = (
            np.zeros((k, self.grid.n_cells, self.p)) if config.store_alpha else None
        )
        self.k_done = 0
        self.accept_post = {}  # block -> (accepts, attempts) arrays over taxa
        self.membership_counts = None
        if dataset.townships is not None:
            self.membership_counts = [
                np.zeros(ov.cells.size) for ov in dataset.townships.overlaps
            ]
            self.membership_sweeps = 0
        self._core_cells = self.grid.core_cells()

    def _init_proposals(self):
        cfg = self.config
        blocks = {}
        if cfg.model_kind == prec.CAR:
            blocks["sigma"] = [
                AdaptiveProposal(dim=1, target=cfg.target_accept_1d, log_scale=np.log(0.5))
                for _ in range(self.p)
            ]
        else:
            blocks["mu"] = [
                AdaptiveProposal(dim=1, target=cfg.target_accept_1d, log_scale=np.log(0.5))
                for _ in range(self.p)
            ]
            blocks["sigma_rho"] = [
                AdaptiveProposal(dim=2, target=cfg.target_accept_2d, log_scale=np.log(1.0))
                for _ in range(self.p)
            ]
        return blocks

    def _ensure_factors(self):
        for ts in self.taxon_states:
            if ts.factor is not None:
                continue
            if self.family.kind == prec.CAR:
                ts.factor = self.family.conditional_factor(ts.sigma2, self.stats.a_diag)
            else:
                ts.factor = self.family.conditional_factor(ts.sigma2, self.stats.a_diag, ts.rho)
                if ts.structure_logdet is None:
                    ts.structure_logdet = self.family.structure_logdet(ts.rho)
                ts.qp_rowsum = self.family.qp_rowsum(ts.sigma2, ts.rho)

    def _invalidate_factors(self):
        for ts in self.taxon_states:
            ts.factor = None

    def _record_acceptance(self, block, p_idx, accepted):
        if self.iteration <= self.config.burn_in:
            return
        acc = self.accept_post.setdefault(block, np.zeros((2, self.p)))
        acc[0, p_idx] += int(accepted)
        acc[1, p_idx] += 1

    def sweep(self):
        """One full MCMC iteration."""
        cfg, state, family = self.config, self.state, self.family
        self.iteration += 1
        update_W(state, self.rng)
        assert state.argmax_consistent()  # full scan; stripped under -O
        if self.dataset.townships is not None:
            update_memberships(state, self.dataset.townships, self.rng)
            self.stats = compute_sufficient_stats(state, self.grid.n_cells)
            self._invalidate_factors()
            if self.iteration > cfg.burn_in:
                pos = state.n_gridded
                for t, ov in enumerate(self.dataset.townships.overlaps):
                    nt = self.dataset.townships.taxon_labels[t].size
                    seen = state.tree_cell[pos : pos + nt]
                    local = np.searchsorted(ov.cells, seen)
                    self.membership_counts[t] += np.bincount(local, minlength=ov.cells.size)
                    pos += nt
                self.membership_sweeps += 1
        else:
            # counts are static; only the latent means move
            self.stats = compute_sufficient_stats(state, self.grid.n_cells)
        self._ensure_factors()
        at_burn_end = self.iteration == cfg.burn_in
        for p_idx, ts in enumerate(self.taxon_states):
            wbar_p = self.stats.wbar[:, p_idx]
            if family.kind == prec.CAR:
                prop = self.proposals["sigma"][p_idx]
                accepted = _update_hyper_car(family, ts, self.stats, wbar_p, self.hp, prop, self.rng)
                self._record_acceptance("sigma", p_idx, accepted)
                prop.maybe_adapt(cfg.adapt_interval)
                b = self.stats.a_diag * wbar_p
            else:
                prop_mu = self.proposals["mu"][p_idx]
                acc_mu = _update_hyper_spde_mu(
                    family, ts, self.stats, wbar_p, self.hp, prop_mu, self.rng
                )
                self._record_acceptance("mu", p_idx, acc_mu)
                prop_mu.maybe_adapt(cfg.adapt_interval)
                prop_sr = self.proposals["sigma_rho"][p_idx]
                acc_sr = _update_hyper_spde_range(
                    family, ts, self.stats, wbar_p, self.hp, prop_sr, self.rng
                )
                self._record_acceptance("sigma_rho", p_idx, acc_sr)
                prop_sr.maybe_adapt(cfg.adapt_interval)
                b = self.stats.a_diag * wbar_p + ts.mu * ts.qp_rowsum
            # unconditional field refresh so alpha mixes even on rejection
            state.alpha[:, p_idx] = prec.sample_gaussian(ts.factor, b, self.rng)
        if at_burn_end:
            for props in self.proposals.values():
                for prop in props:
                    prop.frozen = True

    def retain(self, k_idx):
        alpha_core = self.state.alpha[self._core_cells]
        self.theta[k_idx] = est.estimate_theta(alpha_core, self.config.t_mc, self.rng)
        for p_idx, ts in enumerate(self.taxon_states):
            self.sigma2_trace[k_idx, p_idx] = ts.sigma2
            if self.mu_trace is not None:
                self.mu_trace[k_idx, p_idx] = ts.mu
                self.rho_trace[k_idx, p_idx] = ts.rho
        if self.alpha_samples is not None:
            self.alpha_samples[k_idx] = self.state.alpha
        self.k_done = k_idx + 1


def run_chain(
    dataset: Dataset,
    grid: GridSpec,
    config: SamplerConfig,
    progress_path=None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    resume_from=None,
    structure_override=None,
):
    """Run one chain and return (PosteriorSamples, ChainDiagnostics).

    Retained proportion samples are computed in-stream at the evenly
    spaced post-burn-in iterations. With a fixed seed the run is
    bitwise reproducible; checkpoint/resume restores the generator
    state so a resumed run matches an uninterrupted one exactly.
    """
    if grid is not dataset.grid and grid != dataset.grid:
        raise InvalidArgumentError("grid does not match the dataset's grid")
    chain = _Chain(dataset, config, structure_override)
    if resume_from is not None:
        _restore_checkpoint(chain, resume_from)
    retained = config.retained_iterations()
    t0 = time.time()
    progress = open(progress_path, "a", encoding="utf-8") if progress_path else None
    log_every = max(1, config.n_iter // 200)
    try:
        while chain.iteration < config.n_iter:
            chain.sweep()
            if chain.k_done < retained.size and chain.iteration == retained[chain.k_done]:
                chain.retain(chain.k_done)
            if progress and (chain.iteration % log_every == 0 or chain.iteration == config.n_iter):
                rec = {
                    "iter": chain.iteration,
                    "elapsed_s": round(time.time() - t0, 3),
                    "sigma2": [round(ts.sigma2, 6) for ts in chain.taxon_states],
                }
                if config.model_kind == prec.SPDE:
                    rec["rho"] = [round(ts.rho, 6) for ts in chain.taxon_states]
                    rec["mu"] = [round(ts.mu, 6) for ts in chain.taxon_states]
                progress.write(json.dumps(rec) + "\n")
                progress.flush()
            if (
                checkpoint_path
                and checkpoint_every
                and chain.iteration % checkpoint_every == 0
                and chain.iteration < config.n_iter
            ):
                save_checkpoint(chain, checkpoint_path)
    finally:
        if progress:
            progress.close()
    elapsed = time.time() - t0
    samples = est.PosteriorSamples(
        grid=grid,
        taxa=dataset.taxa,
        theta=chain.theta,
        seed=config.seed,
        model_kind=config.model_kind,
    )
    acceptance = {
        block: (acc[0] / np.maximum(acc[1], 1)) for block, acc in chain.accept_post.items()
    }
    theta_ess = None
    if config.n_retained >= 10:
        k, m_core, p = chain.theta.shape
        theta_ess = np.empty((m_core, p))
        for i in range(m_core):
            for j in range(p):
                theta_ess[i, j] = est.effective_sample_size(chain.theta[:, i, j])
    membership_freq = None
    if chain.membership_counts is not None and chain.membership_sweeps:
        # fraction of (tree, sweep) pairs placed in each support cell
        membership_freq = [
            c / (chain.membership_sweeps * labels.size)
            for c, labels in zip(chain.membership_counts, dataset.townships.taxon_labels)
        ]
    diags = ChainDiagnostics(
        acceptance=acceptance,
        sigma2_trace=chain.sigma2_trace,
        mu_trace=chain.mu_trace,
        rho_trace=chain.rho_trace,
        theta_ess=theta_ess,
        membership_freq=membership_freq,
        elapsed_s=elapsed,
        alpha_samples=chain.alpha_samples,
    )
    return samples, diags


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(chain: _Chain, path) -> None:
    """Serialize the full chain state (latents, hyperparameters,
    adaptation state, retained samples so far, RNG state) to an npz
    archive with a format version; layout documented in the README."""
    rng_state = chain.rng.bit_generator.state
    payload = {
        "version": np.int64(CHECKPOINT_VERSION),
        "fingerprint": np.bytes_(chain.config.fingerprint().encode()),
        "iteration": np.int64(chain.iteration),
        "alpha": chain.state.alpha,
        "w": chain.state.w,
        "tree_cell": chain.state.tree_cell,
        "k_done": np.int64(chain.k_done),
        "theta": chain.theta,
        "sigma2_trace": chain.sigma2_trace,
        "sigma2": np.array([ts.sigma2 for ts in chain.taxon_states]),
        "mu": np.array([ts.mu for ts in chain.taxon_states]),
        "rho": np.array([ts.rho for ts in chain.taxon_states]),
        "rng_state": np.bytes_(str(rng_state["state"]["state"]).encode()),
        "rng_inc": np.bytes_(str(rng_state["state"]["inc"]).encode()),
        "rng_has_uint32": np.int64(rng_state["has_uint32"]),
        "rng_uinteger": np.int64(rng_state["uinteger"]),
    }
    if chain.mu_trace is not None:
        payload["mu_trace"] = chain.mu_trace
        payload["rho_trace"] = chain.rho_trace
    if chain.alpha_samples is not None:
        payload["alpha_samples"] = chain.alpha_samples
    if chain.membership_counts is not None:
        payload["membership_sweeps"] = np.int64(chain.membership_sweeps)
        for t, c in enumerate(chain.membership_counts):
            payload[f"membership_counts_{t}"] = c
    for block, props in chain.proposals.items():
        payload[f"prop_{block}_log_scale"] = np.array([pr.log_scale for pr in props])
        payload[f"prop_{block}_attempts"] = np.array([pr.attempts for pr in props])
        payload[f"prop_{block}_accepts"] = np.array([pr.accepts for pr in props])
        payload[f"prop_{block}_batches"] = np.array([pr.batches for pr in props])
        payload[f"prop_{block}_frozen"] = np.array([pr.frozen for pr in props])
        if props and props[0].dim == 2:
            payload[f"prop_{block}_count"] = np.array([pr.count for pr in props])
            payload[f"prop_{block}_mean"] = np.stack([pr.mean for pr in props])
            payload[f"prop_{block}_m2"] = np.stack([pr.m2 for pr in props])
    for block, acc in chain.accept_post.items():
        payload[f"accept_{block}"] = acc
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def _restore_checkpoint(chain: _Chain, path) -> None:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(
                f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )
        if bytes(data["fingerprint"]).decode() != chain.config.fingerprint():
            raise ConfigError("checkpoint was written under a different configuration")
        if data["alpha"].shape != chain.state.alpha.shape:
            raise ConfigError("checkpoint shape does not match the dataset")
        chain.iteration = int(data["iteration"])
        chain.state.alpha[:] = data["alpha"]
        chain.state.w[:] = data["w"]
        chain.state.tree_cell[:] = data["tree_cell"]
        chain.k_done = int(data["k_done"])
        chain.theta[:] = data["theta"]
        chain.sigma2_trace[:] = data["sigma2_trace"]
        sigma2, mu, rho = data["sigma2"], data["mu"], data["rho"]
        for p_idx, ts in enumerate(chain.taxon_states):
            ts.sigma2 = float(sigma2[p_idx])
            ts.mu = float(mu[p_idx])
            ts.rho = float(rho[p_idx])
            ts.factor = None
            ts.structure_logdet = None
            ts.qp_rowsum = None
        if chain.mu_trace is not None:
            chain.mu_trace[:] = data["mu_trace"]
            chain.rho_trace[:] = data["rho_trace"]
        if chain.alpha_samples is not None and "alpha_samples" in data:
            chain.alpha_samples[:] = data["alpha_samples"]
        if chain.membership_counts is not None and "membership_sweeps" in data:
            chain.membership_sweeps = int(data["membership_sweeps"])
            for t in range(len(chain.membership_counts)):
                chain.membership_counts[t][:] = data[f"membership_counts_{t}"]
        for block, props in chain.proposals.items():
            for p_idx, pr in enumerate(props):
                pr.log_scale = float(data[f"prop_{block}_log_scale"][p_idx])
                pr.attempts = int(data[f"prop_{block}_attempts"][p_idx])
                pr.accepts = int(data[f"prop_{block}_accepts"][p_idx])
                pr.batches = int(data[f"prop_{block}_batches"][p_idx])
                pr.frozen = bool(data[f"prop_{block}_frozen"][p_idx])
                if pr.dim == 2 and f"prop_{block}_count" in data:
                    pr.count = int(data[f"prop_{block}_count"][p_idx])
                    pr.mean = data[f"prop_{block}_mean"][p_idx].copy()
                    pr.m2 = data[f"prop_{block}_m2"][p_idx].copy()
        for key in data.files:
            if key.startswith("accept_"):
                chain.accept_post[key[len("accept_") :]] = data[key].copy()
        state = chain.rng.bit_generator.state
        state["state"]["state"] = int(bytes(data["rng_state"]).decode())
        state["state"]["inc"] = int(bytes(data["rng_inc"]).decode())
        state["has_uint32"] = int(data["rng_has_uint32"])
        state["uinteger"] = int(data["rng_uinteger"])
        chain.rng.bit_generator.state = state
