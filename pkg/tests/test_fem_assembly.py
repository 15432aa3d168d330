"""Operator assembly tests, including an independent dense quadrature oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnp2d.fem_assembly import (
    FemSpace,
    _REF_MASS,
    _REF_STIFF,
    assemble_advection,
    assemble_drift,
    assemble_mass,
    assemble_stiffness,
    clip_cell,
    polygon_area,
)
from pnp2d.geometry import GeometryError, GridSpec, build_level_set, classify_nodes

CENTER = (0.5, 0.5)
RADIUS = 0.15


def _space(n, radius=RADIUS):
    grid = GridSpec(n)
    phi = build_level_set(grid, CENTER, radius)
    return FemSpace(grid, classify_nodes(grid, phi))


# ---------------------------------------------------------------------------
# dense brute-force oracle: loop-based assembly with a 5x5 Gauss rule
# ---------------------------------------------------------------------------

def _dense_oracle(grid, kind, w=None):
    nodes_x, nodes_y = grid.node_coordinates()
    h = grid.h
    npts = grid.n_nodes
    mat = np.zeros((npts, npts))
    gx, gw = np.polynomial.legendre.leggauss(5)
    gx = 0.5 * (gx + 1.0)  # to [0, 1]
    gw = 0.5 * gw

    def shape(xi, eta):
        return np.array([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta])

    def shape_grad(xi, eta):
        return (
            np.array(
                [
                    [-(1 - eta), -(1 - xi)],
                    [1 - eta, -xi],
                    [eta, xi],
                    [-eta, 1 - xi],
                ]
            )
            / h
        )

    for cell in grid.cell_node_indices():
        for xi, wx in zip(gx, gw):
            for eta, wy in zip(gx, gw):
                weight = wx * wy * h * h
                n = shape(xi, eta)
                g = shape_grad(xi, eta)
                if kind == "mass":
                    mat += weight * np.outer(
                        _scatter(n, cell, npts), _scatter(n, cell, npts)
                    )
                elif kind == "stiffness":
                    gs = _scatter_grad(g, cell, npts)
                    mat += weight * gs @ gs.T
                elif kind == "drift":
                    wval = float(n @ w[cell])
                    gs = _scatter_grad(g, cell, npts)
                    mat += weight * wval * gs @ gs.T
    return mat


def _scatter(local, cell, npts):
    out = np.zeros(npts)
    out[cell] = local
    return out


def _scatter_grad(local, cell, npts):
    out = np.zeros((npts, 2))
    out[cell] = local
    return out


def test_reference_element_matrices_closed_form():
    mass_exact = np.array(
        [[4, 2, 1, 2], [2, 4, 2, 1], [1, 2, 4, 2], [2, 1, 2, 4]]
    ) / 36.0
    stiff_exact = np.array(
        [[4, -1, -2, -1], [-1, 4, -1, -2], [-2, -1, 4, -1], [-1, -2, -1, 4]]
    ) / 6.0
    np.testing.assert_allclose(_REF_MASS, mass_exact, atol=1e-15)
    np.testing.assert_allclose(_REF_STIFF, stiff_exact, atol=1e-15)


def test_assembly_matches_dense_oracle_no_hole():
    grid = GridSpec(4)
    space = _space(4, radius=0.0)
    rng = np.random.default_rng(7)
    w = rng.standard_normal(grid.n_nodes)
    for kind, op in [
        ("mass", assemble_mass(space)),
        ("stiffness", assemble_stiffness(space)),
        ("drift", assemble_drift(space, w)),
    ]:
        dense = _dense_oracle(grid, kind, w=w)
        np.testing.assert_allclose(op.matrix.toarray(), dense, atol=1e-12)


def test_mass_total_equals_domain_area():
    space = _space(100)
    mass = assemble_mass(space)
    assert abs(mass.total() - space.domain_area()) < 1e-12
    assert abs(space.domain_area() - 0.92931) < 1e-3
    hole_free = _space(50, radius=0.0)
    assert abs(assemble_mass(hole_free).total() - 1.0) < 1e-12


def test_clipped_area_matches_analytic_hole_area():
    space = _space(100)
    assert abs(space.domain_area() - (1 - np.pi * RADIUS ** 2)) < 1e-4


def test_stiffness_annihilates_constants():
    space = _space(100)
    stiff = assemble_stiffness(space)
    ones = np.ones(space.n_dofs)
    assert np.max(np.abs(stiff @ ones)) < 1e-13
    assert stiff.symmetric
    asym = stiff.matrix - stiff.matrix.T
    assert abs(asym).max() == 0.0


def test_nine_point_sparsity():
    space = _space(100)
    mat = assemble_mass(space).matrix
    row_counts = np.diff(mat.indptr)
    assert row_counts.max() <= 9


def test_mass_is_positive_definite():
    space = _space(20)
    dense = assemble_mass(space).matrix.toarray()
    eigs = np.linalg.eigvalsh(dense)
    assert eigs.min() > 0.0


def test_drift_of_unity_is_stiffness():
    space = _space(60)
    stiff = assemble_stiffness(space)
    drift1 = assemble_drift(space, np.ones(space.n_dofs))
    diff = abs(drift1.matrix - stiff.matrix).max()
    assert diff < 1e-14


def test_drift_is_linear_in_coefficient():
    space = _space(40)
    rng = np.random.default_rng(3)
    w = rng.standard_normal(space.n_dofs)
    twice = assemble_drift(space, 2.0 * w).matrix
    once = assemble_drift(space, w).matrix
    assert abs(twice - 2.0 * once).max() < 1e-13


def test_drift_advection_duality():
    space = _space(60)
    rng = np.random.default_rng(11)
    c = rng.standard_normal(space.n_dofs)
    p = rng.standard_normal(space.n_dofs)
    lhs = assemble_drift(space, c) @ p
    rhs = assemble_advection(space, p) @ c
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_drift_row_and_column_sums_vanish():
    space = _space(60)
    rng = np.random.default_rng(5)
    w = rng.standard_normal(space.n_dofs)
    drift = assemble_drift(space, w)
    ones = np.ones(space.n_dofs)
    assert np.max(np.abs(drift @ ones)) < 1e-13
    assert np.max(np.abs(drift.matrix.T @ ones)) < 1e-13
    adv = assemble_advection(space, w)
    assert np.max(np.abs(adv.matrix.T @ ones)) < 1e-13


def test_clip_cell_half_cut():
    h = 0.01
    poly = clip_cell(np.array([-1.0, -1.0, 1.0, 1.0]), (0.0, 0.0), h)
    assert polygon_area(poly) == pytest.approx(0.5 * h * h, rel=1e-14)


def test_clip_cell_corner_cut():
    h = 0.1
    # linear level set x + y - h/2 sampled at the nodes
    phi4 = np.array([-0.5 * h, 0.5 * h, 1.5 * h, 0.5 * h])
    poly = clip_cell(phi4, (0.0, 0.0), h)
    assert polygon_area(poly) == pytest.approx(h * h / 8.0, rel=1e-14)


def test_clip_cell_rejects_uncut_and_checkerboard():
    with pytest.raises(GeometryError):
        clip_cell(np.array([-1.0, -1.0, -1.0, -1.0]), (0.0, 0.0), 0.1)
    with pytest.raises(GeometryError):
        clip_cell(np.array([1.0, 1.0, 1.0, 1.0]), (0.0, 0.0), 0.1)
    with pytest.raises(AssertionError):
        clip_cell(np.array([-1.0, 1.0, -1.0, 1.0]), (0.0, 0.0), 0.1)


def test_clip_cell_snapped_node_on_interface():
    h = 0.1
    poly = clip_cell(np.array([-1.0, 0.0, 1.0, 0.0]), (0.0, 0.0), h)
    # interface passes through the SE and NW grid points
    assert polygon_area(poly) == pytest.approx(0.5 * h * h, rel=1e-14)
    assert len(poly) == 3


@settings(max_examples=200, deadline=None)
@given(
    st.lists(
        st.floats(min_value=0.02, max_value=3.0) | st.floats(min_value=-3.0, max_value=-0.02),
        min_size=4,
        max_size=4,
    )
)
def test_clip_cell_area_bounds(phi_list):
    phi4 = np.array(phi_list)
    neg = phi4 < 0
    h = 0.25
    if neg.all() or not neg.any():
        return
    if neg[0] == neg[2] and neg[1] == neg[3] and neg[0] != neg[1]:
        return
    poly = clip_cell(phi4, (0.0, 0.0), h)
    area = polygon_area(poly)
    assert 0.0 < area <= h * h * (1 + 1e-12)
    assert poly[:, 0].min() >= -1e-12 and poly[:, 0].max() <= h + 1e-12
    assert poly[:, 1].min() >= -1e-12 and poly[:, 1].max() <= h + 1e-12


def test_cut_cells_respect_area_floor():
    space = _space(100)
    h4 = space.grid.h ** 4
    assert space.cut_areas.min() >= 0.125 * h4
    assert space.cut_areas.max() <= space.grid.h ** 2 * (1 + 1e-12)


def test_annotations_name_the_forms():
    space = _space(20)
    assert "mass" in assemble_mass(space).annotation
    assert "stiffness" in assemble_stiffness(space).annotation
    assert "drift" in assemble_drift(space, np.ones(space.n_dofs)).annotation
