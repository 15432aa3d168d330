"""Q1 finite-element operators on the cut-cell grid.

Bilinear forms over the fluid region are integrated cell by cell. Cells fully
inside the region use a 2x2 Gauss rule, which is exact for every integrand
appearing here (products of bilinear basis functions and their gradients).
Cells crossed by the interface are clipped against the linear interpolant of
the snapped nodal level set, triangulated by a centroid fan, and integrated
with a degree-2 three-point rule per triangle.

Operators:

* mass ``B[i,j] = int v_i v_j``
* stiffness ``L[i,j] = int grad(v_i) . grad(v_j)``
* drift ``H[w][i,j] = int w grad(v_j) . grad(v_i)`` for a nodal coefficient w
* advection ``A[p][i,k] = int v_k grad(p) . grad(v_i)`` for a nodal potential p

``H`` and ``A`` share every quadrature point, so the duality
``H[c] @ p == A[p] @ c`` and the identity ``H[1] == L`` hold to roundoff, and
both have exactly zero row and column sums (discrete conservation under the
weak zero-flux boundary conditions).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import GeometryError, GridSpec, NodeClassification

logger = logging.getLogger(__name__)

#: Smallest admissible clipped-cell area in units of h**4; guaranteed by the
#: h**2 node snapping performed during classification.
MIN_CLIP_AREA_FACTOR = 0.125

# Local node order within a cell: SW, SE, NE, NW (counterclockwise).
_REF_NODES = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def _basis(points: np.ndarray) -> np.ndarray:
    """Q1 basis values on the reference cell, shape (npoints, 4)."""
    xi, eta = points[:, 0], points[:, 1]
    return np.stack(
        [(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta], axis=1
    )


def _basis_grad(points: np.ndarray) -> np.ndarray:
    """Q1 basis gradients on the reference cell, shape (npoints, 4, 2)."""
    xi, eta = points[:, 0], points[:, 1]
    dxi = np.stack([-(1 - eta), (1 - eta), eta, -eta], axis=1)
    deta = np.stack([-(1 - xi), -xi, xi, (1 - xi)], axis=1)
    return np.stack([dxi, deta], axis=2)


def _gauss_2x2() -> tuple[np.ndarray, np.ndarray]:
    g = 0.5 / np.sqrt(3.0)
    pts = np.array(
        [[0.5 - g, 0.5 - g], [0.5 + g, 0.5 - g], [0.5 + g, 0.5 + g], [0.5 - g, 0.5 + g]]
    )
    return pts, np.full(4, 0.25)


def _reference_tensors() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact reference-cell mass matrix, stiffness matrix, and drift tensor.

    mass scales with h**2; stiffness and the drift tensor are h-independent.
    drift[a, j, i] = int N_a grad(N_j) . grad(N_i) over the reference cell.
    """
    pts, w = _gauss_2x2()
    n = _basis(pts)
    g = _basis_grad(pts)
    mass = np.einsum("q,qi,qj->ij", w, n, n)
    stiff = np.einsum("q,qid,qjd->ij", w, g, g)
    drift = np.einsum("q,qa,qjd,qid->aji", w, n, g, g)
    return mass, stiff, drift


_REF_MASS, _REF_STIFF, _REF_DRIFT = _reference_tensors()

# Degree-2 triangle rule (barycentric midpoint-opposing points, weight 1/3).
_TRI_POINTS = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
_TRI_WEIGHT = 1.0 / 3.0


def clip_cell(phi4: np.ndarray, origin: tuple[float, float], h: float) -> np.ndarray:
    """Polygon (in physical coordinates) of the fluid part of one cell.

    ``phi4`` holds the snapped level-set values at the cell nodes in SW, SE,
    NE, NW order; the fluid region is where the edgewise-linear interpolant
    is negative. Returns the polygon vertices counterclockwise, shape (m, 2).

    Raises GeometryError if all four values have one sign (nothing to clip).
    A checkerboard sign pattern would make the interface topology ambiguous
    within the cell; it cannot occur for interfaces resolved by the grid and
    is rejected by an assertion.
    """
    phi4 = np.asarray(phi4, dtype=float)
    neg = phi4 < 0.0
    if neg.all() or not neg.any():
        raise GeometryError(
            f"cell is not cut by the interface (level-set values {phi4})"
        )
    assert not (neg[0] == neg[2] and neg[1] == neg[3] and neg[0] != neg[1]), (
        "checkerboard sign pattern in a cell; the interface is under-resolved"
    )
    verts: list[np.ndarray] = []
    for k in range(4):
        k_next = (k + 1) % 4
        if neg[k]:
            verts.append(_REF_NODES[k])
        if neg[k] != neg[k_next]:
            t = phi4[k] / (phi4[k] - phi4[k_next])
            verts.append(_REF_NODES[k] + t * (_REF_NODES[k_next] - _REF_NODES[k]))
    poly = np.asarray(verts)
    # Crossings that land exactly on a snapped node duplicate that vertex.
    keep = np.linalg.norm(poly - np.roll(poly, 1, axis=0), axis=1) > 1e-14
    poly = poly[keep]
    return np.asarray(origin) + h * poly


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area of a polygon given counterclockwise."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _triangle_quadrature(poly: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centroid-fan triangulation with the 3-point degree-2 rule per triangle.

    Returns (points, weights); the weights sum to the polygon area. The fan
    is valid because a square clipped by a single chord is convex.
    """
    centroid = poly.mean(axis=0)
    pts, wts = [], []
    m = len(poly)
    for k in range(m):
        a, b = poly[k], poly[(k + 1) % m]
        u, v = a - centroid, b - centroid
        area = 0.5 * (u[0] * v[1] - u[1] * v[0])
        assert area > 0.0, "clip polygon is not counterclockwise"
        corners = np.stack([centroid, a, b])
        pts.append(_TRI_POINTS @ corners[1:] + np.outer(1 - _TRI_POINTS.sum(1), centroid))
        wts.append(np.full(3, _TRI_WEIGHT * area))
    return np.concatenate(pts), np.concatenate(wts)


@dataclass
class SparseOperator:
    """A CSR matrix tagged with its symmetry and the bilinear form it holds."""

    matrix: sp.csr_matrix
    symmetric: bool
    annotation: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def __matmul__(self, other: np.ndarray) -> np.ndarray:
        return self.matrix @ other

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def total(self) -> float:
        return float(self.matrix.sum())


class FemSpace:
    """Assembly context: active cells, cut-cell quadrature, scatter pattern.

    All operators act on the active degrees of freedom defined by the node
    classification; fields are flat arrays of length ``n_dofs``.
    """

    def __init__(self, grid: GridSpec, cls: NodeClassification):
        self.grid = grid
        self.cls = cls
        h = grid.h
        cells = grid.cell_node_indices()
        phi_cells = cls.phi_eff[cells]
        n_neg = (phi_cells < 0.0).sum(axis=1)
        full = cells[n_neg == 4]
        cut = cells[(n_neg >= 1) & (n_neg <= 3)]
        if cls.dof_of_node[full].min(initial=0) < 0 or cls.dof_of_node[cut].min(initial=0) < 0:
            raise GeometryError("an active cell touches an inactive node")
        self.full_dofs = cls.dof_of_node[full]
        self.cut_dofs = cls.dof_of_node[cut]

        # Per cut cell: clip polygon, then quadrature data padded to a common
        # point count (padding entries carry zero weight).
        x, y = grid.node_coordinates()
        cut_pts, cut_wts, self.cut_areas = [], [], np.zeros(len(cut))
        for k, cell in enumerate(cut):
            origin = (x[cell[0]], y[cell[0]])
            poly = clip_cell(cls.phi_eff[cell], origin, h)
            area = polygon_area(poly)
            assert area >= MIN_CLIP_AREA_FACTOR * h ** 4, (
                f"clipped cell area {area:g} below the snapping guarantee"
            )
            pts, wts = _triangle_quadrature(poly)
            self.cut_areas[k] = area
            cut_pts.append((pts - origin) / h)  # reference coordinates
            cut_wts.append(wts)
        nq = max((len(w) for w in cut_wts), default=0)
        self.cut_w = np.zeros((len(cut), nq))
        cut_ref = np.zeros((len(cut), nq, 2))
        for k, (pts, wts) in enumerate(zip(cut_pts, cut_wts)):
            self.cut_w[k, : len(wts)] = wts
            cut_ref[k, : len(wts)] = pts
        flat = cut_ref.reshape(-1, 2)
        self.cut_n = _basis(flat).reshape(len(cut), nq, 4)
        self.cut_g = _basis_grad(flat).reshape(len(cut), nq, 4, 2) / h

        def scatter(dofs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            rows = np.broadcast_to(dofs[:, :, None], (*dofs.shape, 4)).ravel()
            cols = np.broadcast_to(dofs[:, None, :], (dofs.shape[0], 4, 4)).ravel()
            return rows, cols

        fr, fc = scatter(self.full_dofs)
        cr, cc = scatter(self.cut_dofs)
        self._rows = np.concatenate([fr, cr])
        self._cols = np.concatenate([fc, cc])
        self._mass: SparseOperator | None = None
        self._stiffness: SparseOperator | None = None
        logger.debug(
            "fem space with %d dofs, %d full cells, %d cut cells",
            self.n_dofs, len(self.full_dofs), len(self.cut_dofs),
        )

    @property
    def n_dofs(self) -> int:
        return self.cls.n_dofs

    def dof_coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        x, y = self.grid.node_coordinates()
        return x[self.cls.node_of_dof], y[self.cls.node_of_dof]

    def domain_area(self) -> float:
        return len(self.full_dofs) * self.grid.h ** 2 + float(self.cut_areas.sum())

    def _assemble(
        self, full_el: np.ndarray, cut_el: np.ndarray, symmetric: bool, annotation: str
    ) -> SparseOperator:
        if symmetric:
            # guard against summation-order noise in the einsum contractions
            full_el = 0.5 * (full_el + full_el.transpose(0, 2, 1))
            cut_el = 0.5 * (cut_el + cut_el.transpose(0, 2, 1))
        data = np.concatenate([full_el.ravel(), cut_el.ravel()])
        n = self.n_dofs
        mat = sp.coo_matrix((data, (self._rows, self._cols)), shape=(n, n)).tocsr()
        return SparseOperator(mat, symmetric, annotation)

    def mass(self) -> SparseOperator:
        if self._mass is None:
            full = np.broadcast_to(
                self.grid.h ** 2 * _REF_MASS, (len(self.full_dofs), 4, 4)
            )
            cut = np.einsum("cq,cqi,cqj->cij", self.cut_w, self.cut_n, self.cut_n)
            self._mass = self._assemble(full, cut, True, "mass: int v_i v_j")
        return self._mass

    def stiffness(self) -> SparseOperator:
        if self._stiffness is None:
            full = np.broadcast_to(_REF_STIFF, (len(self.full_dofs), 4, 4))
            cut = np.einsum("cq,cqid,cqjd->cij", self.cut_w, self.cut_g, self.cut_g)
            self._stiffness = self._assemble(
                full, cut, True, "stiffness: int grad(v_i) . grad(v_j)"
            )
        return self._stiffness

    def drift(self, coefficient: np.ndarray) -> SparseOperator:
        """H[w] with nodal coefficient w: ``int w grad(v_j) . grad(v_i)``."""
        w_full = coefficient[self.full_dofs]
        full = np.einsum("ca,aji->cij", w_full, _REF_DRIFT)
        w_at_q = np.einsum("cqa,ca->cq", self.cut_n, coefficient[self.cut_dofs])
        cut = np.einsum("cq,cqid,cqjd->cij", self.cut_w * w_at_q, self.cut_g, self.cut_g)
        return self._assemble(full, cut, True, "drift: int w grad(v_j) . grad(v_i)")

    def advection(self, potential: np.ndarray) -> SparseOperator:
        """A[p] with nodal potential p: ``int v_k grad(p) . grad(v_i)``.

        Dual to :meth:`drift`: ``H[c] @ p == A[p] @ c`` for any nodal c, p.
        """
        p_full = potential[self.full_dofs]
        full = np.einsum("cj,kji->cik", p_full, _REF_DRIFT)
        dp = np.einsum("cj,cqjd->cqd", potential[self.cut_dofs], self.cut_g)
        tmp = np.einsum("cq,cqd,cqid->cqi", self.cut_w, dp, self.cut_g)
        cut = np.einsum("cqi,cqk->cik", tmp, self.cut_n)
        return self._assemble(
            full, cut, False, "advection: int v_k grad(p) . grad(v_i)"
        )


def assemble_mass(space: FemSpace) -> SparseOperator:
    return space.mass()


def assemble_stiffness(space: FemSpace) -> SparseOperator:
    return space.stiffness()


def assemble_drift(space: FemSpace, coefficient: np.ndarray) -> SparseOperator:
    return space.drift(coefficient)


def assemble_advection(space: FemSpace, potential: np.ndarray) -> SparseOperator:
    return space.advection(potential)
