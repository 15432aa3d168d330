"""Drift-diffusion model: parameters, representations, block operators, diagnostics.

Two mass-weighted species densities c+ and c- diffuse and drift in the
self-consistent potential on the unit square minus a circular obstacle,
with zero-flux walls everywhere.  The model is handled in one of two
equivalent representations:

* primitive: nodal blocks (c_plus, c_minus, phi);
* quasi-neutral: nodal blocks (total, charge, phi), where
  total = c+/m+ + c-/m- and charge = (c+/m+ - c-/m-)/epsilon.

The quasi-neutral pair stays O(1) as the coupling parameter epsilon tends
to zero and admits epsilon = 0 exactly; there the charge block is fixed
algebraically by the potential row instead of being stepped in time.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem_assembly import FemSpace, SparseOperator
from .geometry import GridSpec, NodeClassification, build_level_set, classify_nodes
from .linear_algebra import (
    BlockSystem,
    ConstrainedSolver,
    PrefactoredSolver,
    solve_constrained,
)

logger = logging.getLogger(__name__)

DEFAULT_OBSTACLE = ((0.5, 0.5), 0.15)


class UnsupportedConfigurationError(ValueError):
    """A formulation/parameter combination outside the supported set."""


class Formulation(enum.Enum):
    """Which triple of nodal blocks a state carries."""

    PRIMITIVE = "primitive"
    QUASI_NEUTRAL = "quasi_neutral"

    @property
    def block_labels(self) -> tuple[str, str, str]:
        if self is Formulation.PRIMITIVE:
            return ("c_plus", "c_minus", "phi")
        return ("total", "charge", "phi")


@dataclass(frozen=True)
class PhysicalParams:
    """Diffusion coefficients, molar masses and the Debye parameter.

    Parameters
    ----------
    epsilon : float
        Dimensionless Debye parameter scaling the potential equation.
        epsilon = 0 is a valid value, but only the quasi-neutral
        formulation admits it.
    d_plus, d_minus : float
        Species diffusion coefficients (nondimensional).
    m_plus, m_minus : float
        Species molar masses (nondimensional).
    """

    epsilon: float
    d_plus: float = 1.5
    d_minus: float = 0.5
    m_plus: float = 23.0
    m_minus: float = 265.0

    def __post_init__(self) -> None:
        if not self.epsilon >= 0.0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        for name in ("d_plus", "d_minus", "m_plus", "m_minus"):
            value = getattr(self, name)
            if not value > 0.0:
                raise ValueError(f"{name} must be > 0, got {value}")

    @property
    def d_tilde(self) -> float:
        """Mean diffusion coefficient (D+ + D-)/2."""
        return 0.5 * (self.d_plus + self.d_minus)

    @property
    def d_hat(self) -> float:
        """Half difference of the diffusion coefficients (D+ - D-)/2."""
        return 0.5 * (self.d_plus - self.d_minus)

    @property
    def d_ambipolar(self) -> float:
        """Effective diffusivity D+ D- / d_tilde of the epsilon = 0 limit."""
        return self.d_plus * self.d_minus / self.d_tilde

    def require_positive_epsilon(self, context: str) -> None:
        if self.epsilon == 0.0:
            raise UnsupportedConfigurationError(
                f"{context} requires epsilon > 0; epsilon = 0 is supported "
                "only by the quasi-neutral formulation"
            )


@dataclass(frozen=True)
class InitialData:
    """Gaussian release of the two species near the bottom wall.

    Each species starts as the bump v0/(2 sigma^2) exp(-r^2/(2 sigma^2))
    around its own center, so each carries mass close to pi*v0 (up to
    wall and obstacle clipping of the far tails).

    ``background`` adds a uniform, exactly charge-neutral floor to both
    species densities (c+/m+ and c-/m- each gain the same constant).  The
    default data decay to vacuum away from the bumps; in vacuum the charge
    of the quasi-neutral closure grows like the log-density curvature while
    the density itself vanishes, so epsilon * charge overtakes the density
    and the small-epsilon and epsilon = 0 trajectories keep an almost
    epsilon-independent distance there.  A positive floor removes that
    degeneracy; limit-consistency comparisons need it.
    """

    v0: float = 1.0e-6
    sigma: float = 0.05
    x_plus: float = 0.4
    y_plus: float = 0.2
    x_minus: float = 0.6
    y_minus: float = 0.2
    background: float = 0.0

    def __post_init__(self) -> None:
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not self.v0 > 0.0:
            raise ValueError(f"v0 must be > 0, got {self.v0}")
        if self.background < 0.0:
            raise ValueError(f"background must be >= 0, got {self.background}")

    @classmethod
    def symmetric_offset(cls, offset: float, **kwargs) -> "InitialData":
        """Centers at x = 1/2 -+ offset, same height for both species."""
        return cls(x_plus=0.5 - offset, x_minus=0.5 + offset, **kwargs)

    @property
    def peak(self) -> float:
        """Amplitude v0 / (2 sigma^2) at each center."""
        return self.v0 / (2.0 * self.sigma**2)

    def gaussian(self, x: np.ndarray, y: np.ndarray, center: tuple[float, float]) -> np.ndarray:
        r2 = (x - center[0]) ** 2 + (y - center[1]) ** 2
        return self.peak * np.exp(-r2 / (2.0 * self.sigma**2))


@dataclass
class StateVector:
    """Three nodal blocks over the active nodes, tagged with representation.

    ``u1``/``u2`` hold (c_plus, c_minus) in the primitive representation
    and (total, charge) in the quasi-neutral one; ``phi`` is always the
    potential.  Use the named accessors to avoid mixing the two up.
    """

    formulation: Formulation
    u1: np.ndarray
    u2: np.ndarray
    phi: np.ndarray
    t: float = 0.0

    def __post_init__(self) -> None:
        self.u1 = np.asarray(self.u1, dtype=float)
        self.u2 = np.asarray(self.u2, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if not (self.u1.shape == self.u2.shape == self.phi.shape):
            raise ValueError("state blocks must share one shape")

    @classmethod
    def primitive(cls, c_plus, c_minus, phi, t: float = 0.0) -> "StateVector":
        return cls(Formulation.PRIMITIVE, c_plus, c_minus, phi, t)

    @classmethod
    def quasi_neutral(cls, total, charge, phi, t: float = 0.0) -> "StateVector":
        return cls(Formulation.QUASI_NEUTRAL, total, charge, phi, t)

    def _require(self, form: Formulation) -> None:
        if self.formulation is not form:
            raise ValueError(
                f"state holds {self.formulation.value} blocks, not {form.value}"
            )

    @property
    def c_plus(self) -> np.ndarray:
        self._require(Formulation.PRIMITIVE)
        return self.u1

    @property
    def c_minus(self) -> np.ndarray:
        self._require(Formulation.PRIMITIVE)
        return self.u2

    @property
    def total(self) -> np.ndarray:
        """Mass-weighted density sum c+/m+ + c-/m-."""
        self._require(Formulation.QUASI_NEUTRAL)
        return self.u1

    @property
    def charge(self) -> np.ndarray:
        """Charge imbalance (c+/m+ - c-/m-) scaled by 1/epsilon."""
        self._require(Formulation.QUASI_NEUTRAL)
        return self.u2

    def copy(self) -> "StateVector":
        return StateVector(
            self.formulation, self.u1.copy(), self.u2.copy(), self.phi.copy(), self.t
        )

    def validate(self) -> None:
        """Raise FloatingPointError if any block has non-finite entries."""
        for label, block in zip(self.formulation.block_labels, (self.u1, self.u2, self.phi)):
            if not np.isfinite(block).all():
                raise FloatingPointError(
                    f"non-finite values in the {label} block at t = {self.t:g}"
                )

    def number_densities(self, params: PhysicalParams) -> tuple[np.ndarray, np.ndarray]:
        """Weighted densities (c+/m+, c-/m-) in either representation.

        The change of variables total = n+ + n-, charge = (n+ - n-)/eps
        inverts to n+- = (total +- eps*charge)/2, which is what the
        quasi-neutral branch evaluates; at epsilon = 0 both species carry
        total/2 exactly.
        """
        if self.formulation is Formulation.PRIMITIVE:
            return self.u1 / params.m_plus, self.u2 / params.m_minus
        shift = params.epsilon * self.u2
        return 0.5 * (self.u1 + shift), 0.5 * (self.u1 - shift)

    def concentrations(self, params: PhysicalParams) -> tuple[np.ndarray, np.ndarray]:
        """Species densities (c+, c-) in either representation."""
        n_plus, n_minus = self.number_densities(params)
        if self.formulation is Formulation.PRIMITIVE:
            return n_plus * params.m_plus, n_minus * params.m_minus
        return params.m_plus * n_plus, params.m_minus * n_minus

    def convert(self, formulation: Formulation, params: PhysicalParams) -> "StateVector":
        """Return the same state in the requested representation."""
        if formulation is self.formulation:
            return self.copy()
        if formulation is Formulation.PRIMITIVE:
            c_plus, c_minus = self.concentrations(params)
            return StateVector(formulation, c_plus, c_minus, self.phi.copy(), self.t)
        params.require_positive_epsilon("conversion to the quasi-neutral blocks")
        n_plus = self.u1 / params.m_plus
        n_minus = self.u2 / params.m_minus
        return StateVector(
            formulation,
            n_plus + n_minus,
            (n_plus - n_minus) / params.epsilon,
            self.phi.copy(),
            self.t,
        )


@dataclass
class FemOperators:
    """Assembled bilinear forms and factorized solvers for one mesh.

    Attributes
    ----------
    space : FemSpace
        Assembly context (grid, node classification, quadrature).
    mass, stiffness : SparseOperator
        The forms (u, v) and (grad u, grad v) over the fluid domain.
    weight : ndarray
        Row sums of the mass matrix; ``weight @ c`` integrates a nodal
        field, and the vector spans the range deficiency of ``stiffness``.
    mass_solver : PrefactoredSolver
        Direct solver for the mass matrix.
    poisson_solver : ConstrainedSolver
        Stiffness solve with the weight-mean of the solution pinned to
        zero and a multiplier absorbing incompatible right-hand sides.
    """

    space: FemSpace
    mass: SparseOperator
    stiffness: SparseOperator
    weight: np.ndarray
    area: float
    mass_solver: PrefactoredSolver
    poisson_solver: ConstrainedSolver
    x: np.ndarray
    y: np.ndarray

    @classmethod
    def build(cls, grid: GridSpec, obstacle=DEFAULT_OBSTACLE) -> "FemOperators":
        """Classify nodes, assemble forms, factorize the recurring solvers.

        ``obstacle`` is a ((cx, cy), radius) pair, or None for the plain
        unit square with no hole.
        """
        if obstacle is None:
            level = np.full(grid.n_nodes, -1.0)
        else:
            center, radius = obstacle
            level = build_level_set(grid, center, radius)
        classification = classify_nodes(grid, level)
        space = FemSpace(grid, classification)
        mass = space.mass()
        stiffness = space.stiffness()
        weight = mass.row_sums()
        x, y = space.dof_coordinates()
        ops = cls(
            space=space,
            mass=mass,
            stiffness=stiffness,
            weight=weight,
            area=space.domain_area(),
            mass_solver=PrefactoredSolver(mass.matrix),
            poisson_solver=ConstrainedSolver(stiffness.matrix, weight),
            x=x,
            y=y,
        )
        logger.info(
            "operators assembled: n_dofs=%d h=%.4g area=%.8g",
            ops.n_dofs, grid.h, ops.area,
        )
        return ops

    @property
    def grid(self) -> GridSpec:
        return self.space.grid

    @property
    def classification(self) -> NodeClassification:
        return self.space.cls

    @property
    def h(self) -> float:
        return self.space.grid.h

    @property
    def n_dofs(self) -> int:
        return self.space.n_dofs

    def norm(self, field: np.ndarray) -> float:
        """Mass-weighted L2 norm sqrt(field^T B field)."""
        field = np.asarray(field, dtype=float)
        return float(np.sqrt(field @ (self.mass.matrix @ field)))


def _require_center_inside(ops: FemOperators, center: tuple[float, float], label: str) -> None:
    d2 = (ops.x - center[0]) ** 2 + (ops.y - center[1]) ** 2
    if float(d2.min()) > 2.0 * ops.h**2:
        raise ValueError(
            f"{label} species center {center} lies outside the fluid domain"
        )


def initial_state(
    data: InitialData,
    params: PhysicalParams,
    formulation: Formulation,
    ops: FemOperators,
    *,
    neutralize: bool = False,
) -> StateVector:
    """Nodal initial state with the potential closed by its constraint row.

    Parameters
    ----------
    neutralize : bool
        Rescale the negative-species amplitude so the discrete net charge
        ``weight @ (c+/m+ - c-/m-)`` vanishes exactly.  The default data
        carry a small positive net charge (equal released masses, unequal
        molar masses); the dynamics conserve it, so it never decays.
        Limit-consistency studies need it removed.

    Notes
    -----
    The data are not assumed well prepared: the charge block is whatever
    the Gaussians imply, and only the potential is solved to be consistent
    with it.  At epsilon = 0 the potential and charge are both closed from
    the density sum by the degenerate drift balance.
    """
    if formulation is Formulation.PRIMITIVE:
        params.require_positive_epsilon("the primitive formulation")
    _require_center_inside(ops, (data.x_plus, data.y_plus), "positive")
    _require_center_inside(ops, (data.x_minus, data.y_minus), "negative")
    c_plus = data.gaussian(ops.x, ops.y, (data.x_plus, data.y_plus))
    c_minus = data.gaussian(ops.x, ops.y, (data.x_minus, data.y_minus))
    if neutralize:
        held = float(ops.weight @ (c_plus / params.m_plus))
        have = float(ops.weight @ (c_minus / params.m_minus))
        c_minus = c_minus * (held / have)
    # the floor joins after neutralization so it stays pointwise neutral
    n_plus = c_plus / params.m_plus + data.background
    n_minus = c_minus / params.m_minus + data.background
    rho = n_plus - n_minus
    if formulation is Formulation.PRIMITIVE:
        phi, _ = ops.poisson_solver.solve_constrained(ops.mass.matrix @ rho)
        phi /= params.epsilon
        return StateVector.primitive(n_plus * params.m_plus,
                                     n_minus * params.m_minus, phi)
    total = n_plus + n_minus
    if params.epsilon > 0.0:
        charge = rho / params.epsilon
        phi, _ = ops.poisson_solver.solve_constrained(ops.mass.matrix @ charge)
    else:
        phi, charge = quasi_neutral_closure(ops, params, total)
    return StateVector.quasi_neutral(total, charge, phi)


def quasi_neutral_closure(
    ops: FemOperators,
    params: PhysicalParams,
    total: np.ndarray,
    *,
    regularization: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray]:
    """Potential and charge consistent with a density sum at epsilon = 0.

    At exact quasi-neutrality the drift balance pins the potential,
    H[d_tilde * total] phi = -d_hat * L total, and the potential row then
    fixes the charge, q = B^{-1} L phi.  Where the density sum vanishes
    the balance leaves phi undetermined; a Tikhonov term
    ``regularization * max|d_tilde * total| * L`` makes the solve definite
    and extends phi smoothly into those regions (report-only values there).
    """
    total = np.asarray(total, dtype=float)
    coefficient = params.d_tilde * total
    scale = float(np.max(np.abs(coefficient))) if coefficient.size else 0.0
    if scale == 0.0:
        zero = np.zeros_like(total)
        return zero, zero.copy()
    matrix = ops.space.drift(coefficient).matrix + (regularization * scale) * ops.stiffness.matrix
    rhs = -params.d_hat * (ops.stiffness.matrix @ total)
    phi, _ = solve_constrained(matrix, rhs, ops.weight)
    charge = ops.mass_solver.solve(ops.stiffness.matrix @ phi)
    return phi, charge


def build_blocks(
    formulation: Formulation,
    params: PhysicalParams,
    state: StateVector,
    ops: FemOperators,
) -> tuple[BlockSystem, BlockSystem]:
    """Left mass-like block and right stiffness/drift block of the system.

    Returns ``(b_eps, theta)`` with the semantics
    ``d/dt (b_eps @ Q) = theta @ Q`` for the evolution rows and
    ``0 = (theta @ Q) row`` for the constraint row; the drift coefficients
    inside theta are frozen at the given state.

    Primitive rows (c+, c-, phi):

        [B, 0, 0]               [-D+ L,  0,     -H[D+ c+]]
        [0, B, 0]   and         [0,     -D- L,  +H[D- c-]]
        [0, 0, 0]               [B/m+,  -B/m-,  -eps L   ]

    Quasi-neutral rows (total, charge, phi):

        [B, 0,     0]           [-dt~ L,    -eps dh^ L,  -H[dh^ s + eps dt~ q]]
        [0, eps B, 0]   and     [-dh^ L,    -eps dt~ L,  -H[dt~ s + eps dh^ q]]
        [0, 0,     0]           [0,         -B,          +L                   ]

    with dt~ = d_tilde, dh^ = d_hat, s = total, q = charge.
    """
    if state.formulation is not formulation:
        raise ValueError(
            f"state carries {state.formulation.value} blocks; expected {formulation.value}"
        )
    B = ops.mass.matrix
    L = ops.stiffness.matrix
    n = B.shape[0]
    zero = sp.csr_matrix((n, n))
    if formulation is Formulation.PRIMITIVE:
        params.require_positive_epsilon("the primitive block system")
        b_eps = BlockSystem([[B, None, None], [None, B, None], [None, None, zero]])
        h_plus = ops.space.drift(params.d_plus * state.c_plus).matrix
        h_minus = ops.space.drift(params.d_minus * state.c_minus).matrix
        theta = BlockSystem(
            [
                [-params.d_plus * L, None, -h_plus],
                [None, -params.d_minus * L, h_minus],
                [(1.0 / params.m_plus) * B, (-1.0 / params.m_minus) * B, -params.epsilon * L],
            ]
        )
        return b_eps, theta
    eps = params.epsilon
    b_eps = BlockSystem([[B, None, None], [None, eps * B, None], [None, None, zero]])
    a_plus = params.d_hat * state.total + eps * params.d_tilde * state.charge
    a_minus = params.d_tilde * state.total + eps * params.d_hat * state.charge
    theta = BlockSystem(
        [
            [-params.d_tilde * L, (-eps * params.d_hat) * L, -ops.space.drift(a_plus).matrix],
            [-params.d_hat * L, (-eps * params.d_tilde) * L, -ops.space.drift(a_minus).matrix],
            [None, -B, L],
        ]
    )
    return b_eps, theta


@dataclass(frozen=True)
class PecletReport:
    """Outcome of the mesh-Peclet check; a violation is a report, not a fault."""

    ok: bool
    threshold: float
    worst: float
    margin: float
    node: int
    species: str


def peclet_guard(state: StateVector, params: PhysicalParams, h: float) -> PecletReport:
    """Check max(c/m) < 2 eps / h^2 over both species and all nodes.

    Drift-dominated cells destabilize explicitly treated transport once the
    weighted densities exceed the threshold; asymptotic-preserving
    integrators tolerate the violation, so nothing is enforced here.
    """
    n_plus, n_minus = state.number_densities(params)
    threshold = 2.0 * params.epsilon / h**2
    i_plus = int(np.argmax(n_plus))
    i_minus = int(np.argmax(n_minus))
    if n_plus[i_plus] >= n_minus[i_minus]:
        worst, node, species = float(n_plus[i_plus]), i_plus, "plus"
    else:
        worst, node, species = float(n_minus[i_minus]), i_minus, "minus"
    return PecletReport(
        ok=worst < threshold,
        threshold=threshold,
        worst=worst,
        margin=threshold - worst,
        node=node,
        species=species,
    )


def diagnostics(state: StateVector, ops: FemOperators, params: PhysicalParams) -> dict:
    """Scalar health indicators of a state.

    Returns a dict with species masses ``weight @ c+-``, the net charge,
    the quasi-neutrality deficit ||c+/m+ - c-/m-|| in the mass-weighted L2
    norm (computed from eps*charge directly in quasi-neutral form, which
    avoids reconstruction cancellation), its net-charge-centered variant,
    block extrema, and the mesh-Peclet margin.
    """
    c_plus, c_minus = state.concentrations(params)
    if state.formulation is Formulation.QUASI_NEUTRAL:
        rho = params.epsilon * state.charge
    else:
        rho = state.u1 / params.m_plus - state.u2 / params.m_minus
    net_charge = float(ops.weight @ rho)
    centered = rho - net_charge / ops.area
    return {
        "mass_plus": float(ops.weight @ c_plus),
        "mass_minus": float(ops.weight @ c_minus),
        "net_charge": net_charge,
        "qn_deficit": ops.norm(rho),
        "qn_deficit_centered": ops.norm(centered),
        "min_c_plus": float(c_plus.min()),
        "max_c_plus": float(c_plus.max()),
        "min_c_minus": float(c_minus.min()),
        "max_c_minus": float(c_minus.max()),
        "min_phi": float(state.phi.min()),
        "max_phi": float(state.phi.max()),
        "peclet_margin": peclet_guard(state, params, ops.h).margin,
    }
