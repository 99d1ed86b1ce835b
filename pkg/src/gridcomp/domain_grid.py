"""Grid geometry, neighborhood graphs, and township overlap structure.

Cells are indexed row-major from the southwest corner of the *buffered*
lattice: ``index = row * width + col`` with row 0 the southernmost row.
The buffer is a ring of prediction-only cells added on all sides; data
and outputs live on the inner (core) cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

CARDINAL = "cardinal"
DIAGONAL = "diagonal"
SECOND_ORDER = "second_order"

# Stencil offsets (drow, dcol) by neighbor class for the extended graph.
_OFFSETS = {
    CARDINAL: ((0, 1), (0, -1), (1, 0), (-1, 0)),
    DIAGONAL: ((1, 1), (1, -1), (-1, 1), (-1, -1)),
    SECOND_ORDER: ((0, 2), (0, -2), (2, 0), (-2, 0)),
}


@dataclass(frozen=True)
class GridSpec:
    """Rectangular cell lattice with an optional buffer ring.

    nx, ny are the core (data-carrying) dimensions; the full lattice is
    (nx + 2*buffer) by (ny + 2*buffer). cell_size and origin are carried
    as metadata only and never enter any computation.
    """

    nx: int
    ny: int
    buffer: int = 0
    cell_size: float = 8000.0
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise InvalidArgumentError(f"grid dimensions must be >= 1, got {self.nx}x{self.ny}")
        if self.buffer < 0:
            raise InvalidArgumentError(f"buffer must be >= 0, got {self.buffer}")

    @property
    def width(self) -> int:
        return self.nx + 2 * self.buffer

    @property
    def height(self) -> int:
        return self.ny + 2 * self.buffer

    @property
    def n_cells(self) -> int:
        """Total cell count m, buffer included."""
        return self.width * self.height

    @property
    def n_core_cells(self) -> int:
        return self.nx * self.ny

    def index(self, row: int, col: int) -> int:
        """Row-major index in the buffered lattice."""
        return row * self.width + col

    def core_index_to_full(self, core_row, core_col):
        """Map core (unbuffered) coordinates to a buffered-lattice index."""
        core_row = np.asarray(core_row)
        core_col = np.asarray(core_col)
        if np.any((core_row < 0) | (core_row >= self.ny) | (core_col < 0) | (core_col >= self.nx)):
            raise InvalidArgumentError("core cell coordinates outside the unbuffered grid")
        return (core_row + self.buffer) * self.width + (core_col + self.buffer)

    def core_cells(self) -> np.ndarray:
        """Buffered-lattice indices of all core cells, core-row-major order."""
        rows = np.repeat(np.arange(self.ny), self.nx)
        cols = np.tile(np.arange(self.nx), self.ny)
        return (rows + self.buffer) * self.width + (cols + self.buffer)

    def core_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """(col, row) core coordinates aligned with core_cells() order."""
        rows = np.repeat(np.arange(self.ny), self.nx)
        cols = np.tile(np.arange(self.nx), self.ny)
        return cols, rows

    def is_core(self, index) -> np.ndarray:
        """True where a buffered-lattice index falls inside the core region."""
        index = np.asarray(index)
        row, col = index // self.width, index % self.width
        b = self.buffer
        return (
            (index >= 0)
            & (index < self.n_cells)
            & (row >= b)
            & (row < b + self.ny)
            & (col >= b)
            & (col < b + self.nx)
        )


@dataclass(frozen=True)
class NeighborGraph:
    """Symmetric lattice adjacency with per-class edge lists.

    order is "cardinal" (4-neighbor) or "extended" (cardinal + diagonal +
    second-order cardinal, the 13-point stencil footprint). Each entry of
    ``edges`` maps a class name to an (E, 2) int array of directed edges;
    both directions of every undirected edge are present.
    """

    n_cells: int
    order: str
    edges: dict = field(repr=False)

    def degree(self, kind: str) -> np.ndarray:
        """Per-cell neighbor count for one class."""
        e = self.edges.get(kind)
        deg = np.zeros(self.n_cells, dtype=np.int64)
        if e is not None and e.size:
            deg += np.bincount(e[:, 0], minlength=self.n_cells)
        return deg

    def neighbors(self, i: int) -> list[tuple[int, str]]:
        """All (neighbor index, class) pairs of cell i."""
        out = []
        for kind, e in self.edges.items():
            if e.size:
                out.extend((int(k), kind) for k in e[e[:, 0] == i, 1])
        return out


def build_grid(nx: int, ny: int, buffer: int = 0, **metadata) -> GridSpec:
    """Construct a GridSpec; raises InvalidArgumentError on bad dimensions."""
    return GridSpec(nx=int(nx), ny=int(ny), buffer=int(buffer), **metadata)


def _class_edges(height, width, offsets):
    rows = np.repeat(np.arange(height), width)
    cols = np.tile(np.arange(width), height)
    src, dst = [], []
    for dr, dc in offsets:
        rr = rows + dr
        cc = cols + dc
        ok = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        src.append((rows[ok] * width + cols[ok]))
        dst.append((rr[ok] * width + cc[ok]))
    return np.stack([np.concatenate(src), np.concatenate(dst)], axis=1)


def build_neighbor_graph(grid: GridSpec, order: str = CARDINAL) -> NeighborGraph:
    """Build the symmetric neighborhood graph for the buffered lattice."""
    if order not in (CARDINAL, "extended"):
        raise InvalidArgumentError(f"unknown graph order {order!r}")
    h, w = grid.height, grid.width
    kinds = [CARDINAL] if order == CARDINAL else [CARDINAL, DIAGONAL, SECOND_ORDER]
    edges = {kind: _class_edges(h, w, _OFFSETS[kind]) for kind in kinds}
    return NeighborGraph(n_cells=grid.n_cells, order=order, edges=edges)


@dataclass(frozen=True)
class TownshipOverlap:
    """Normalized overlap weights of one township onto grid cells.

    cells hold buffered-lattice indices (restricted to core cells);
    weights are the areal-overlap fractions and sum to 1.
    """

    township_id: str
    cells: np.ndarray
    weights: np.ndarray


def normalize_township(township_id, raw_entries, grid: GridSpec) -> TownshipOverlap:
    """Turn (cell index, area) entries into normalized overlap weights.

    Cell indices address the buffered lattice and must fall in the core
    region. Zero-area entries are dropped; all-zero areas or out-of-grid
    cells are invalid. Entries for the same cell are merged.
    """
    if not raw_entries:
        raise InvalidArgumentError(f"township {township_id}: no overlap entries")
    idx = np.array([e[0] for e in raw_entries], dtype=np.int64)
    areas = np.array([e[1] for e in raw_entries], dtype=float)
    if np.any(areas < 0):
        raise InvalidArgumentError(f"township {township_id}: negative overlap area")
    if not np.all(grid.is_core(idx)):
        bad = idx[~grid.is_core(idx)]
        raise InvalidArgumentError(
            f"township {township_id}: cell {bad[0]} outside the unbuffered grid"
        )
    total = areas.sum()
    if total <= 0:
        raise InvalidArgumentError(f"township {township_id}: all overlap areas are zero")
    keep = areas > 0
    cells, inv = np.unique(idx[keep], return_inverse=True)
    weights = np.zeros(cells.size)
    np.add.at(weights, inv, areas[keep] / total)
    return TownshipOverlap(township_id=str(township_id), cells=cells, weights=weights)
