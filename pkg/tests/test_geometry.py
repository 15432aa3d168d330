"""Grid, level set, classification and boundary polyline tests."""

import numpy as np
import pytest

from pnp2d.geometry import (
    GeometryError,
    GridSpec,
    boundary_polyline,
    build_level_set,
    classify_nodes,
    level_set_values,
    polyline_length,
)

CENTER = (0.5, 0.5)
RADIUS = 0.15


def test_grid_basic_layout():
    grid = GridSpec(10)
    assert grid.h == pytest.approx(0.1)
    assert grid.n_nodes == 121
    x, y = grid.node_coordinates()
    assert x[0] == 0.0 and y[0] == 0.0
    assert x[-1] == pytest.approx(1.0) and y[-1] == pytest.approx(1.0)
    # node (i=3, j=2) has index 2*11 + 3
    assert x[2 * 11 + 3] == pytest.approx(0.3)
    assert y[2 * 11 + 3] == pytest.approx(0.2)


def test_grid_rejects_degenerate():
    with pytest.raises(GeometryError):
        GridSpec(1)
    with pytest.raises(GeometryError):
        GridSpec(10, side_length=0.0)


def test_cell_node_indices_orientation():
    grid = GridSpec(3)
    cells = grid.cell_node_indices()
    assert cells.shape == (9, 4)
    # first cell touches nodes 0,1 and the two above them
    assert list(cells[0]) == [0, 1, 5, 4]
    x, y = grid.node_coordinates()
    # counterclockwise order: SW, SE, NE, NW
    sw, se, ne, nw = cells[4]
    assert x[se] > x[sw] and y[nw] > y[sw]
    assert x[ne] > x[nw] and y[ne] > y[se]


def test_level_set_sign_convention():
    grid = GridSpec(100)
    phi = build_level_set(grid, CENTER, RADIUS)
    x, y = grid.node_coordinates()
    center_node = np.argmin((x - 0.5) ** 2 + (y - 0.5) ** 2)
    assert phi[center_node] > 0  # hole interior
    assert phi[0] < 0  # corner is fluid


def test_level_set_random_point_sign_agreement():
    rng = np.random.default_rng(42)
    x = rng.uniform(0, 1, size=1_000_000)
    y = rng.uniform(0, 1, size=1_000_000)
    phi = level_set_values(x, y, CENTER, RADIUS)
    inside_hole = (x - 0.5) ** 2 + (y - 0.5) ** 2 < RADIUS ** 2
    assert np.array_equal(phi > 0, inside_hole)


def test_level_set_clearance_guard():
    grid = GridSpec(100)
    with pytest.raises(GeometryError):
        build_level_set(grid, CENTER, 0.49)
    with pytest.raises(GeometryError):
        build_level_set(grid, (0.2, 0.5), 0.19)
    build_level_set(grid, CENTER, 0.45)  # clearance 0.05 > 2h = 0.02


def test_level_set_zero_radius_is_hole_free():
    grid = GridSpec(20)
    phi = build_level_set(grid, CENTER, 0.0)
    cls = classify_nodes(grid, phi)
    assert cls.internal.all()
    assert not cls.ghost.any()


def test_snap_threshold_is_h_squared():
    grid = GridSpec(10)
    h2 = grid.h ** 2
    phi = np.full(grid.n_nodes, -1.0)
    probe = 5 * grid.n_nodes_per_side + 5  # an interior node
    for value, expect_internal in [
        (-h2 * (1 + 1e-6), True),
        (-h2 * (1 - 1e-6), False),
    ]:
        phi_probe = phi.copy()
        phi_probe[probe] = value
        cls = classify_nodes(grid, phi_probe)
        assert cls.internal[probe] == expect_internal
        assert cls.snapped[probe] != expect_internal
        if not expect_internal:
            assert cls.phi_eff[probe] == 0.0
            assert cls.ghost[probe]  # neighbors are internal


def test_classification_idempotent():
    grid = GridSpec(50)
    phi = build_level_set(grid, CENTER, RADIUS)
    cls1 = classify_nodes(grid, phi)
    cls2 = classify_nodes(grid, cls1.phi_eff)
    assert np.array_equal(cls1.internal, cls2.internal)
    assert np.array_equal(cls1.ghost, cls2.ghost)
    assert np.array_equal(cls1.phi_eff, cls2.phi_eff)


def test_classification_structure_default_geometry():
    grid = GridSpec(100)
    phi = build_level_set(grid, CENTER, RADIUS)
    cls = classify_nodes(grid, phi)
    m = grid.n_nodes_per_side
    internal = cls.internal.reshape(m, m)
    ghost = cls.ghost.reshape(m, m)
    inactive = cls.inactive.reshape(m, m)
    assert not (cls.internal & cls.ghost).any()
    # every ghost node has an internal 8-neighbor, no inactive node does
    padded = np.pad(internal, 1)
    for j, i in zip(*np.nonzero(ghost)):
        assert padded[j : j + 3, i : i + 3].sum() - internal[j, i] > 0
    for j, i in zip(*np.nonzero(inactive)):
        assert padded[j : j + 3, i : i + 3].sum() == 0
    # the hole excludes roughly pi r^2 / h^2 nodes from the fluid
    expected_internal = grid.n_nodes - np.pi * RADIUS ** 2 / grid.h ** 2
    assert abs(cls.internal.sum() - expected_internal) < 120
    # dof map round-trips
    dofs = cls.dof_of_node[cls.node_of_dof]
    assert np.array_equal(dofs, np.arange(cls.n_dofs))


def test_boundary_polyline_on_circle_and_gridlines():
    grid = GridSpec(100)
    pts = boundary_polyline(grid, CENTER, RADIUS)
    dist = np.hypot(pts[:, 0] - 0.5, pts[:, 1] - 0.5)
    assert np.max(np.abs(dist - RADIUS)) < 1e-12
    on_x = np.min(np.abs(pts[:, 0, None] / grid.h - np.arange(101)), axis=1)
    on_y = np.min(np.abs(pts[:, 1, None] / grid.h - np.arange(101)), axis=1)
    assert np.all((on_x < 1e-9) | (on_y < 1e-9))


def test_boundary_polyline_length_near_circumference():
    grid = GridSpec(100)
    length = polyline_length(boundary_polyline(grid, CENTER, RADIUS))
    circumference = 2 * np.pi * RADIUS
    assert abs(length - circumference) / circumference < 0.01
    assert length < circumference  # inscribed


def test_boundary_polyline_monotone_refinement():
    circumference = 2 * np.pi * RADIUS
    lengths = [
        polyline_length(boundary_polyline(GridSpec(n), CENTER, RADIUS))
        for n in (25, 50, 100, 200)
    ]
    assert all(l < circumference for l in lengths)
    assert lengths == sorted(lengths)
    assert lengths[-1] > lengths[0]


def test_boundary_polyline_too_coarse():
    grid = GridSpec(4)
    with pytest.raises(GeometryError):
        boundary_polyline(grid, (0.375, 0.375), 0.05)
