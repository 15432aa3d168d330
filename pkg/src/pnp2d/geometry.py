"""Cartesian grid, circle level set, and active/ghost node classification.

The computational domain is a square with an excluded circular hole. Nodes of
a uniform Q1 grid are classified from nodal level-set values:

* internal nodes lie strictly in the fluid region,
* ghost nodes are outside it but belong to the 8-neighborhood of an internal
  node (their basis functions overlap cut cells),
* inactive nodes are irrelevant to the discretization.

Nodes closer to the interface than ``h**2`` (in level-set value) are snapped
onto it: their effective level-set value becomes exactly zero, so the
reconstructed interface passes through the grid point. This keeps clipped
quadrature cells from degenerating to slivers of area below ``h**4 / 8``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class GeometryError(ValueError):
    """Raised for geometric configurations the discretization cannot handle."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform square grid with ``n_cells_per_side**2`` Q1 cells.

    Node ``(i, j)`` sits at ``origin + (i*h, j*h)`` and has linear index
    ``j * (n_cells_per_side + 1) + i``.
    """

    n_cells_per_side: int
    side_length: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if self.n_cells_per_side < 2:
            raise GeometryError(
                f"n_cells_per_side must be at least 2, got {self.n_cells_per_side}"
            )
        if not self.side_length > 0:
            raise GeometryError(f"side_length must be positive, got {self.side_length}")

    @property
    def h(self) -> float:
        return self.side_length / self.n_cells_per_side

    @property
    def n_nodes_per_side(self) -> int:
        return self.n_cells_per_side + 1

    @property
    def n_nodes(self) -> int:
        return self.n_nodes_per_side ** 2

    def node_coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Return flat arrays (x, y) of all node positions, node-index order."""
        m = self.n_nodes_per_side
        ticks_x = self.origin[0] + self.h * np.arange(m)
        ticks_y = self.origin[1] + self.h * np.arange(m)
        xg, yg = np.meshgrid(ticks_x, ticks_y, indexing="xy")
        return xg.ravel(), yg.ravel()

    def cell_node_indices(self) -> np.ndarray:
        """Indices of the 4 nodes of every cell, shape (n_cells, 4).

        Local order is counterclockwise: SW, SE, NE, NW.
        """
        n, m = self.n_cells_per_side, self.n_nodes_per_side
        ci, cj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
        sw = (cj * m + ci).ravel()
        return np.stack([sw, sw + 1, sw + m + 1, sw + m], axis=1)


def level_set_values(
    x: np.ndarray, y: np.ndarray, center: tuple[float, float], radius: float
) -> np.ndarray:
    """Level-set function of the circular hole: radius - distance to center.

    Negative in the fluid region (outside the hole), positive inside the hole.
    A zero radius describes a degenerate hole; every finite point is then in
    the fluid.
    """
    dist = np.hypot(np.asarray(x) - center[0], np.asarray(y) - center[1])
    return radius - dist


def build_level_set(
    grid: GridSpec, center: tuple[float, float], radius: float
) -> np.ndarray:
    """Nodal level-set values of the hole on ``grid``.

    Raises GeometryError unless the hole keeps a clearance of at least ``2h``
    from the outer square boundary (a hole touching or crossing the boundary
    would break the cut-cell topology). ``radius == 0`` yields a hole-free
    domain and skips the clearance check.
    """
    if radius < 0:
        raise GeometryError(f"radius must be nonnegative, got {radius}")
    x, y = grid.node_coordinates()
    if radius == 0.0:
        return np.full(grid.n_nodes, -np.inf)
    ox, oy = grid.origin
    side = grid.side_length
    clearance = min(
        center[0] - radius - ox,
        ox + side - (center[0] + radius),
        center[1] - radius - oy,
        oy + side - (center[1] + radius),
    )
    if clearance < 2.0 * grid.h:
        raise GeometryError(
            f"hole must keep a clearance of 2h = {2.0 * grid.h:g} from the outer "
            f"boundary; got {clearance:g} for center {center}, radius {radius}"
        )
    return level_set_values(x, y, center, radius)


@dataclass
class NodeClassification:
    """Masks over all grid nodes plus the snapped level-set values.

    ``phi_eff`` equals the input level set except at snapped nodes, where it
    is exactly zero. Active nodes (internal or ghost) carry degrees of
    freedom; ``dof_of_node`` maps node index to dof index (-1 if inactive).
    """

    internal: np.ndarray
    ghost: np.ndarray
    snapped: np.ndarray
    phi_eff: np.ndarray
    dof_of_node: np.ndarray = field(init=False)
    node_of_dof: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        active = self.internal | self.ghost
        self.dof_of_node = np.full(active.size, -1, dtype=np.int64)
        self.node_of_dof = np.flatnonzero(active)
        self.dof_of_node[self.node_of_dof] = np.arange(self.node_of_dof.size)

    @property
    def active(self) -> np.ndarray:
        return self.internal | self.ghost

    @property
    def inactive(self) -> np.ndarray:
        return ~self.active

    @property
    def n_dofs(self) -> int:
        return self.node_of_dof.size


def _dilate8(mask2d: np.ndarray) -> np.ndarray:
    """8-neighborhood dilation of a boolean mask (excluding the node itself)."""
    padded = np.pad(mask2d, 1, mode="constant", constant_values=False)
    out = np.zeros_like(mask2d)
    for dj in (-1, 0, 1):
        for di in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            out |= padded[1 + dj : 1 + dj + mask2d.shape[0], 1 + di : 1 + di + mask2d.shape[1]]
    return out


def classify_nodes(grid: GridSpec, phi: np.ndarray) -> NodeClassification:
    """Classify nodes as internal / ghost / inactive with boundary snapping.

    Snapping is applied first: nodes with ``|phi| < h**2`` (strict) get an
    effective value of exactly zero and count as lying on the interface,
    hence outside the open fluid region. Internal means ``phi_eff < 0``;
    ghosts are the non-internal nodes with an internal 8-neighbor. The
    operation is idempotent: reclassifying from ``phi_eff`` changes nothing.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (grid.n_nodes,):
        raise GeometryError(
            f"level set has shape {phi.shape}, expected ({grid.n_nodes},)"
        )
    thresh = grid.h ** 2
    snapped = np.abs(phi) < thresh
    phi_eff = np.where(snapped, 0.0, phi)
    m = grid.n_nodes_per_side
    internal2d = (phi_eff < 0.0).reshape(m, m)
    ghost2d = ~internal2d & _dilate8(internal2d)
    cls = NodeClassification(
        internal=internal2d.ravel(),
        ghost=ghost2d.ravel(),
        snapped=snapped,
        phi_eff=phi_eff,
    )
    logger.debug(
        "classified %d internal, %d ghost, %d inactive nodes (%d snapped)",
        cls.internal.sum(), cls.ghost.sum(), cls.inactive.sum(), snapped.sum(),
    )
    return cls


def boundary_polyline(
    grid: GridSpec, center: tuple[float, float], radius: float
) -> np.ndarray:
    """Ordered closed polyline approximating the hole boundary.

    Vertices are the exact intersections of the circle with the grid lines,
    sorted by angle around the center; shape (n_points, 2). The polyline is
    inscribed, so its length approaches the circumference from below under
    refinement.
    """
    if radius <= 0:
        raise GeometryError("boundary_polyline requires a positive radius")
    cx, cy = center
    pts: list[tuple[float, float]] = []
    m = grid.n_nodes_per_side
    ticks_x = grid.origin[0] + grid.h * np.arange(m)
    ticks_y = grid.origin[1] + grid.h * np.arange(m)
    for xi in ticks_x[np.abs(ticks_x - cx) < radius]:
        half = float(np.sqrt(radius ** 2 - (xi - cx) ** 2))
        pts.append((float(xi), cy - half))
        pts.append((float(xi), cy + half))
    for yj in ticks_y[np.abs(ticks_y - cy) < radius]:
        half = float(np.sqrt(radius ** 2 - (yj - cy) ** 2))
        pts.append((cx - half, float(yj)))
        pts.append((cx + half, float(yj)))
    if len(pts) < 3:
        raise GeometryError(
            f"circle of radius {radius} intersects the grid lines in only "
            f"{len(pts)} points; refine the grid"
        )
    arr = np.asarray(pts)
    angles = np.arctan2(arr[:, 1] - cy, arr[:, 0] - cx)
    order = np.argsort(angles, kind="stable")
    arr, angles = arr[order], angles[order]
    # Intersections at grid points show up once per crossing line; keep one.
    keep = np.ones(len(arr), dtype=bool)
    keep[1:] = np.diff(angles) > 1e-14
    return arr[keep]


def polyline_length(points: np.ndarray) -> float:
    """Total length of a closed polyline given as an (n, 2) vertex array."""
    diffs = np.diff(np.vstack([points, points[:1]]), axis=0)
    return float(np.hypot(diffs[:, 0], diffs[:, 1]).sum())
