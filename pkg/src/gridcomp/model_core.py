"""Data-facing model types: counts, township tree records, hyperprior
bounds, and the multinomial/probit quantities used by scoring.

The observation model is multinomial: the taxon of each tree is the
argmax of P latent unit-variance normals centered at the per-taxon
spatial fields, so category probabilities are never needed inside the
sampler and are only materialized by the Monte Carlo estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, ndtr

from .domain_grid import GridSpec, TownshipOverlap
from .errors import InvalidArgumentError


@dataclass(frozen=True)
class TaxonRegistry:
    """Fixed string-to-index mapping for taxa, set at ingestion."""

    names: tuple

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise InvalidArgumentError("duplicate taxon names")
        if not self.names:
            raise InvalidArgumentError("empty taxon registry")

    @property
    def n_taxa(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise InvalidArgumentError(f"unknown taxon {name!r}") from None


@dataclass
class CellCounts:
    """Per-cell taxon counts on the buffered lattice.

    counts is a dense (m, P) integer array; buffer cells and cells
    without data hold zeros. Cells with zero totals are permitted (no
    data; their fields come from the prior conditional).
    """

    grid: GridSpec
    taxa: TaxonRegistry
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.grid.n_cells, self.taxa.n_taxa):
            raise InvalidArgumentError(
                f"counts shape {self.counts.shape} does not match "
                f"(m={self.grid.n_cells}, P={self.taxa.n_taxa})"
            )
        if np.any(self.counts < 0):
            raise InvalidArgumentError("negative counts")

    @property
    def totals(self) -> np.ndarray:
        """n_i = total trees per cell."""
        return self.counts.sum(axis=1)

    @property
    def n_trees(self) -> int:
        return int(self.counts.sum())


@dataclass
class TownshipTrees:
    """Trees recorded per township, each with a taxon but no cell.

    taxon_labels[t] is the int taxon array for township t, aligned with
    overlaps[t]; cell placement is latent and resampled by the chain.
    """

    taxa: TaxonRegistry
    overlaps: list[TownshipOverlap]
    taxon_labels: list[np.ndarray]

    def __post_init__(self):
        if len(self.overlaps) != len(self.taxon_labels):
            raise InvalidArgumentError("overlaps and taxon_labels must align")
        for ov, labels in zip(self.overlaps, self.taxon_labels):
            labels = np.asarray(labels)
            if labels.size == 0:
                raise InvalidArgumentError(f"township {ov.township_id} has no trees")
            if np.any((labels < 0) | (labels >= self.taxa.n_taxa)):
                raise InvalidArgumentError(f"township {ov.township_id}: taxon label out of range")

    @property
    def n_trees(self) -> int:
        return int(sum(len(t) for t in self.taxon_labels))


@dataclass(frozen=True)
class Hyperpriors:
    """Truncation bounds for the hyperparameter priors.

    sigma_p ~ U(0, sigma_upper); mu_p flat on [-mu_bound, mu_bound];
    rho_p ~ U(rho_lower, rho_upper).
    """

    sigma_upper: float = 1000.0
    mu_bound: float = 10.0
    rho_lower: float = 0.1
    rho_upper: float = float(np.exp(5.0))

    def __post_init__(self):
        if min(self.sigma_upper, self.mu_bound, self.rho_lower, self.rho_upper) <= 0:
            raise InvalidArgumentError("hyperprior bounds must be positive")
        if self.rho_lower >= self.rho_upper:
            raise InvalidArgumentError("rho_lower must be < rho_upper")


@dataclass
class Dataset:
    """Gridded counts plus optional township records."""

    cell_counts: CellCounts
    townships: TownshipTrees | None = None

    @property
    def grid(self) -> GridSpec:
        return self.cell_counts.grid

    @property
    def taxa(self) -> TaxonRegistry:
        return self.cell_counts.taxa


@dataclass
class LatentState:
    """All latent variables of one chain (owned by the sampler).

    alpha: (m, P) spatial fields; w: (N, P) latent normals, one row per
    tree; tree_cell: current cell of each tree (static for gridded
    trees, resampled memberships for township trees); tree_taxon: the
    observed labels. Invariant: argmax(w[j]) == tree_taxon[j], ties
    broken toward the lowest taxon index.
    """

    alpha: np.ndarray
    w: np.ndarray
    tree_cell: np.ndarray
    tree_taxon: np.ndarray
    n_gridded: int = 0
    extras: dict = field(default_factory=dict)

    def argmax_consistent(self) -> bool:
        if self.w.shape[0] == 0:
            return True
        return bool(np.all(np.argmax(self.w, axis=1) == self.tree_taxon))


def multinomial_log_pmf(y, theta, check_normalized: bool = True) -> float:
    """Log multinomial probability of count vector y under theta.

    Includes the multinomial coefficient. Returns -inf when some
    category has y_p > 0 with theta_p = 0. ``check_normalized=False``
    skips the sum-to-one precondition for floored (unnormalized)
    predictions used in scoring.
    """
    y = np.asarray(y)
    theta = np.asarray(theta, dtype=float)
    if y.shape != theta.shape:
        raise InvalidArgumentError(f"length mismatch: y has {y.shape}, theta has {theta.shape}")
    if np.any(y < 0) or not np.issubdtype(y.dtype, np.integer):
        raise InvalidArgumentError("y must be non-negative integers")
    if np.any(theta < 0):
        raise InvalidArgumentError("theta must be non-negative")
    if check_normalized and abs(theta.sum() - 1.0) > 1e-9:
        raise InvalidArgumentError(f"theta sums to {theta.sum()}, expected 1")
    n = int(y.sum())
    if n == 0:
        return 0.0
    pos = y > 0
    if np.any(theta[pos] == 0.0):
        return float("-inf")
    coef = gammaln(n + 1) - gammaln(y + 1).sum()
    return float(coef + (y[pos] * np.log(theta[pos])).sum())


def probit_theta_closed_form_p2(alpha1: float, alpha2: float) -> float:
    """Exact first-category probability for the two-category case.

    With independent unit-variance latent normals, P(W_1 > W_2) =
    Phi((alpha1 - alpha2) / sqrt(2)); used as an oracle for the Monte
    Carlo estimator.
    """
    return float(ndtr((alpha1 - alpha2) / np.sqrt(2.0)))
