"""Sparse solve, bordered constraint, and block flattening tests."""

import numpy as np
import pytest
import scipy.sparse as sp

from pnp2d.fem_assembly import FemSpace, assemble_mass, assemble_stiffness
from pnp2d.geometry import GridSpec, build_level_set, classify_nodes
from pnp2d.linear_algebra import (
    BlockSystem,
    ConstrainedSolver,
    PrefactoredSolver,
    SingularMatrixError,
    SolverError,
    solve_constrained,
    solve_sparse,
)


def _random_spd(n, seed):
    rng = np.random.default_rng(seed)
    dense = rng.standard_normal((n, n))
    return sp.csr_matrix(dense @ dense.T + n * np.eye(n))


def _graph_laplacian(n):
    main = 2.0 * np.ones(n)
    main[0] = main[-1] = 1.0
    return sp.diags([-np.ones(n - 1), main, -np.ones(n - 1)], [-1, 0, 1], format="csr")


def test_solve_sparse_roundtrip_and_determinism():
    a = _random_spd(40, 0)
    rng = np.random.default_rng(1)
    b = rng.standard_normal(40)
    x1 = solve_sparse(a, b)
    x2 = solve_sparse(a, b)
    assert np.array_equal(x1, x2)
    assert np.linalg.norm(a @ x1 - b) <= 1e-10 * (
        sp.linalg.norm(a) * np.linalg.norm(x1) + np.linalg.norm(b)
    )


def test_solve_sparse_rejects_non_finite():
    a = _random_spd(5, 2)
    b = np.ones(5)
    bad = a.copy()
    bad.data[0] = np.nan
    with pytest.raises(ValueError):
        solve_sparse(bad, b)
    with pytest.raises(ValueError):
        solve_sparse(a, np.array([1.0, 2.0, np.inf, 0.0, 0.0]))


def test_singular_requires_nullspace_weight():
    lap = _graph_laplacian(30)
    b = np.zeros(30)
    b[0], b[-1] = 1.0, -1.0
    with pytest.raises((SingularMatrixError, SolverError)):
        solve_sparse(lap, b)
    weight = np.ones(30)
    x = solve_sparse(lap, b, nullspace_weight=weight)
    assert abs(weight @ x) < 1e-10 * np.linalg.norm(x)


def test_constrained_solve_matches_pinv_oracle():
    rng = np.random.default_rng(3)
    basis = rng.standard_normal((8, 8))
    sym = basis @ basis.T
    null = rng.standard_normal(8)
    null /= np.linalg.norm(null)
    proj = np.eye(8) - np.outer(null, null)
    a_dense = proj @ sym @ proj  # symmetric with nullspace span(null)
    weight = rng.standard_normal(8) + 2.0  # not orthogonal to null
    b = rng.standard_normal(8)

    x, lam = solve_constrained(sp.csr_matrix(a_dense), b, weight)

    # oracle built from the pseudoinverse: lam removes the incompatible part,
    # the nullspace coefficient enforces the weighted zero mean
    lam_exact = (null @ b) / (null @ weight)
    b_compat = b - lam_exact * weight
    x_particular = np.linalg.pinv(a_dense) @ b_compat
    coeff = -(weight @ x_particular) / (weight @ null)
    x_exact = x_particular + coeff * null

    assert lam == pytest.approx(lam_exact, abs=1e-10)
    np.testing.assert_allclose(x, x_exact, atol=1e-10)


def test_manufactured_poisson_second_order():
    errors = {}
    for n in (50, 100):
        grid = GridSpec(n)
        space = FemSpace(grid, classify_nodes(grid, build_level_set(grid, (0.5, 0.5), 0.0)))
        stiff = assemble_stiffness(space)
        mass = assemble_mass(space)
        weight = mass.row_sums()
        x, y = space.dof_coordinates()
        exact = np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y)
        rhs = mass @ (8 * np.pi ** 2 * exact)
        u = solve_sparse(stiff, rhs, nullspace_weight=weight)
        diff = u - exact
        diff -= (weight @ diff) / weight.sum()
        errors[n] = np.sqrt(diff @ (mass @ diff))
    ratio = errors[50] / errors[100]
    assert 3.5 < ratio < 4.5


def test_prefactored_solver_matches_one_shot():
    a = _random_spd(25, 4)
    solver = PrefactoredSolver(a)
    rng = np.random.default_rng(5)
    for _ in range(3):
        b = rng.standard_normal(25)
        np.testing.assert_allclose(solver.solve(b), solve_sparse(a, b), atol=1e-12)
    assert solver.last_residual >= 0.0


def test_constrained_solver_class_matches_function():
    lap = _graph_laplacian(20)
    weight = np.linspace(1.0, 2.0, 20)
    solver = ConstrainedSolver(lap, weight)
    b = np.sin(np.arange(20.0))
    x1, lam1 = solver.solve_constrained(b)
    x2, lam2 = solve_constrained(lap, b, weight)
    np.testing.assert_allclose(x1, x2, atol=1e-12)
    assert lam1 == pytest.approx(lam2, abs=1e-12)


def test_block_system_order_and_roundtrip():
    n = 6
    eye = sp.identity(n, format="csr")
    sys3 = BlockSystem([[eye, None, None], [None, 2 * eye, None], [None, None, 3 * eye]])
    u1, u2, u3 = np.full(n, 1.0), np.full(n, 2.0), np.full(n, 3.0)
    x = sys3.join(u1, u2, u3)
    assert np.array_equal(x[:n], u1)  # first block first
    assert np.array_equal(x[2 * n :], u3)  # potential block last
    s1, s2, s3 = sys3.split(x)
    assert np.array_equal(s1, u1) and np.array_equal(s2, u2) and np.array_equal(s3, u3)
    full = sys3.assemble()
    assert full.shape == (3 * n, 3 * n)
    np.testing.assert_allclose(full @ x, np.concatenate([u1, 2 * u2, 3 * u3]))


def test_block_system_border_targets_potential_block():
    n = 4
    eye = sp.identity(n, format="csr")
    border = np.arange(1.0, n + 1.0)
    sys3 = BlockSystem([[eye, None, None], [None, eye, None], [None, None, eye]], border)
    full = sys3.assemble()
    assert full.shape == (3 * n + 1, 3 * n + 1)
    last_row = full.toarray()[-1]
    assert np.array_equal(last_row[2 * n : 3 * n], border)
    assert not last_row[: 2 * n].any()
