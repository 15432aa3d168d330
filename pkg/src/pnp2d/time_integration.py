"""IMEX Runge-Kutta stepping for the coupled system, plus a split reference.

The implicit stage systems are solved after an exact change of variables.
Adding and subtracting the two evolution rows decouples their diffusion:
with w+- := total +- eps*charge (quasi-neutral) or w+- := c+- (primitive),
each stage reads

    K+- w+-  +-  delta * H[alpha+-] p = g+-,      K+- = B + delta*D+- L,
    -s+ B w+ + s- B w- + et L p + m*lam = t3,

where delta = dt * a_ii, H[.] is the drift form at the explicit predictor
coefficients, and the constraint row carries the formulation scaling
(quasi-neutral: s+- = 1, et = 2*eps; primitive: s+- = 1/m+-, et = eps).
The K matrices are constant per (dt, diagonal) and factorized once; the
potential comes from the Schur complement on the constraint row, solved
matrix-free by preconditioned GMRES with a direct bordered factorization
as fallback.  Every stage is verified against the row residuals.

All right-hand sides are tracked as mass-matrix images, and the stage
fluxes are reconstructed from those images, so no quantity is ever divided
by eps; the charge-row flux is carried as G2 := F2/eps exactly.

Below ASYMPTOTIC_EPS the quasi-neutral stage is solved in the exactly
equivalent balanced variables v = (w+ + w-)/2, q = (w+ - w-)/(2 eps).
Taking half the sum and eps**-1 times half the difference of the two
w rows gives, with Kt = B + delta*d_tilde*L,

    Kt v + eps*delta*d_hat L q + delta*(d_hat H[c_E] + eps*d_tilde H[q_E]) p
        = r1,
    delta*d_hat L v + eps*Kt q + delta*(d_tilde H[c_E] + eps*d_hat H[q_E]) p
        = eps*r2,
    -B q + L p + lam*m = f3,

so eps appears only multiplicatively and the conditioning is set by the
data, not by 1/eps.  For eps > 0 this sparse system is factorized
directly; the factorization of one stage is reused for later stages as
a GMRES preconditioner while it stays effective, and every solve gets
an iterative refinement pass, which removes the factorization's
backward error.  At eps = 0 the system decouples into the exact limit
scheme: one ambipolar diffusion solve (De = D+D-/d_tilde), a
drift-balance solve for the potential, and the algebraic charge
closure with the uniform lam pinned by the exact invariant
m.q = 1.r2 (net charge conservation).  Every path is certified against
the coupled w-template residual and falls back to its monolithic
factorization.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .linear_algebra import SolverError, solve_sparse
from .pnp_model import (
    FemOperators,
    Formulation,
    PhysicalParams,
    StateVector,
    diagnostics,
)
from .tableaux import ImexTableau

logger = logging.getLogger(__name__)

BLOWUP_FACTOR = 1e12
STAGE_RTOL = 1e-10
GMRES_RTOL = 1e-12
GMRES_RESTART = 150
P1_REFRESH_ITERS = 40
ASYMPTOTIC_EPS = 1e-8
BALANCE_REGULARIZATION = 1e-12
MAX_SWEEPS = 8
# mass-dominant definite systems factor without row pivoting, so the
# symmetric-structure ordering halves their fill; the bordered saddle
# systems pivot heavily (near-singular blocks), which wrecks the fill of
# a symmetric ordering, so they stay on the pivot-robust default
PERMC_DEFINITE = "MMD_AT_PLUS_A"
PERMC_SADDLE = "COLAMD"
# Krylov budget per stage when reusing the factorization of an earlier
# stage's balanced system; beyond the stale threshold the next stage
# refactorizes first instead of probing
VQP_RESTART = 24
VQP_GMRES_RTOL = 1e-11
VQP_STALE_ITERS = 14
VQP_REPROBE_PERIOD = 25
REFINEMENT_PASSES = 2


class StageFailureError(SolverError):
    """An implicit stage could not be solved to tolerance."""

    def __init__(self, stage: int, message: str):
        super().__init__(f"stage {stage + 1}: {message}")
        self.stage = stage


@dataclass
class StageStats:
    stage: int
    method: str  # "schur" | "direct" | "explicit" | "asymptotic"
    iterations: int
    residual: float
    seconds: float


@dataclass
class StageRecord:
    """Full per-stage data, kept only when requested (testing/debugging)."""

    u1_pred: np.ndarray
    u2_pred: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    phi: np.ndarray
    r1: np.ndarray
    r2: np.ndarray | None
    f3: np.ndarray | None
    flux1: np.ndarray
    flux2: np.ndarray | None
    flux3: np.ndarray | None
    delta: float


@dataclass
class StepResult:
    state: StateVector
    blew_up: bool
    stage_stats: list[StageStats] = field(default_factory=list)
    records: list[StageRecord] | None = None


@dataclass
class Trajectory:
    state: StateVector
    series: list[dict]
    blew_up: bool
    blow_up_step: int | None
    n_steps_done: int
    wall_seconds: float
    step_seconds: list[float]
    stats: dict


def _finite(*arrays: np.ndarray) -> bool:
    return all(np.isfinite(a).all() for a in arrays)


def _inf_norm(*arrays: np.ndarray) -> float:
    return max(float(np.max(np.abs(a))) if a.size else 0.0 for a in arrays)


def _frob(matrix: sp.spmatrix) -> float:
    return float(np.sqrt((matrix.data**2).sum()))


class _StageSolver:
    """Bordered (w+, w-, p) saddle solve shared by both formulations."""

    def __init__(
        self,
        ops: FemOperators,
        params: PhysicalParams,
        formulation: Formulation,
        *,
        gmres_rtol: float = GMRES_RTOL,
        restart: int = GMRES_RESTART,
    ):
        self.ops = ops
        self.params = params
        self.gmres_rtol = gmres_rtol
        self.restart = restart
        self.B = ops.mass.matrix
        self.L = ops.stiffness.matrix
        self.m = ops.weight
        self.m_total = float(self.m.sum())
        self.n = ops.n_dofs
        self.pin = int(np.argmax(self.m))
        if formulation is Formulation.QUASI_NEUTRAL:
            self.sigma_plus = self.sigma_minus = 1.0
            self.eps_tilde = 2.0 * params.epsilon
        else:
            self.sigma_plus = 1.0 / params.m_plus
            self.sigma_minus = 1.0 / params.m_minus
            self.eps_tilde = params.epsilon
        # factorization caches, keyed by the exact stage diagonal delta
        self._k_cache: dict[tuple[float, float], tuple[sp.csr_matrix, object, float]] = {}
        self._p1_cache: dict[float, dict] = {}
        self.fallbacks = 0
        self.total_iterations = 0

    def _k(self, d: float, delta: float):
        key = (d, delta)
        entry = self._k_cache.get(key)
        if entry is None:
            mat = (self.B + (delta * d) * self.L).tocsc()
            lu = spla.splu(mat, permc_spec=PERMC_DEFINITE)
            entry = (mat.tocsr(), lu, _frob(mat))
            self._k_cache[key] = entry
        return entry

    def _build_p1(self, delta: float, h_plus: sp.csr_matrix, h_minus: sp.csr_matrix):
        p1 = (
            self.eps_tilde * self.L
            + delta * (self.sigma_plus * h_plus + self.sigma_minus * h_minus)
        ).tocsr()
        pin_row = sp.csr_matrix(
            (np.ones(1), (np.zeros(1, dtype=int), [self.pin])), shape=(1, self.n)
        )
        bordered = sp.bmat(
            [[p1, sp.csr_matrix(self.m.reshape(-1, 1))], [pin_row, None]], format="csc"
        )
        return spla.splu(bordered, permc_spec=PERMC_SADDLE)

    def _direct(self, delta, h_plus, h_minus, g_plus, g_minus, t3):
        """Monolithic bordered factorization; exact at any eps."""
        k_plus, _, _ = self._k(self.params.d_plus, delta)
        k_minus, _, _ = self._k(self.params.d_minus, delta)
        n = self.n
        zero = sp.csr_matrix((n, n))
        col0 = sp.csr_matrix((n, 1))
        col_m = sp.csr_matrix(self.m.reshape(-1, 1))
        pin_row = sp.csr_matrix(
            (np.ones(1), (np.zeros(1, dtype=int), [2 * n + self.pin])), shape=(1, 3 * n + 1)
        )
        full = sp.vstack(
            [
                sp.hstack([k_plus, zero, delta * h_plus, col0]),
                sp.hstack([zero, k_minus, -delta * h_minus, col0]),
                sp.hstack(
                    [-self.sigma_plus * self.B, self.sigma_minus * self.B,
                     self.eps_tilde * self.L, col_m]
                ),
                pin_row,
            ]
        ).tocsc()
        rhs = np.concatenate([g_plus, g_minus, t3, [0.0]])
        lu = spla.splu(full, permc_spec=PERMC_SADDLE)
        sol = lu.solve(rhs)
        return sol[:n], sol[n : 2 * n], sol[2 * n : 3 * n], float(sol[3 * n])

    def _residual(self, delta, h_plus, h_minus, g_plus, g_minus, t3,
                  w_plus, w_minus, p, lam):
        k_plus, _, kp_norm = self._k(self.params.d_plus, delta)
        k_minus, _, km_norm = self._k(self.params.d_minus, delta)
        hp_norm = _frob(h_plus)
        hm_norm = _frob(h_minus)
        tiny = np.finfo(float).tiny
        r1 = k_plus @ w_plus + delta * (h_plus @ p) - g_plus
        s1 = (
            kp_norm * np.linalg.norm(w_plus)
            + delta * hp_norm * np.linalg.norm(p)
            + np.linalg.norm(g_plus)
        )
        r2 = k_minus @ w_minus - delta * (h_minus @ p) - g_minus
        s2 = (
            km_norm * np.linalg.norm(w_minus)
            + delta * hm_norm * np.linalg.norm(p)
            + np.linalg.norm(g_minus)
        )
        r3 = (
            -self.sigma_plus * (self.B @ w_plus)
            + self.sigma_minus * (self.B @ w_minus)
            + self.eps_tilde * (self.L @ p)
            + lam * self.m
            - t3
        )
        s3 = (
            self.sigma_plus * np.linalg.norm(self.B @ w_plus)
            + self.sigma_minus * np.linalg.norm(self.B @ w_minus)
            + self.eps_tilde * _frob(self.L) * np.linalg.norm(p)
            + abs(lam) * np.linalg.norm(self.m)
            + np.linalg.norm(t3)
        )
        return max(
            np.linalg.norm(r1) / max(s1, tiny),
            np.linalg.norm(r2) / max(s2, tiny),
            np.linalg.norm(r3) / max(s3, tiny),
        )

    def solve(self, stage, delta, h_plus, h_minus, g_plus, g_minus, t3):
        """Return (w_plus, w_minus, p, lam, stats) for one implicit stage."""
        start = time.perf_counter()
        n = self.n
        _, lu_plus, _ = self._k(self.params.d_plus, delta)
        _, lu_minus, _ = self._k(self.params.d_minus, delta)
        y_plus = lu_plus.solve(g_plus)
        y_minus = lu_minus.solve(g_minus)
        f_schur = np.concatenate(
            [t3 + self.sigma_plus * (self.B @ y_plus)
             - self.sigma_minus * (self.B @ y_minus), [0.0]]
        )

        def apply_schur(v):
            pv, lv = v[:n], v[n]
            top = (
                self.eps_tilde * (self.L @ pv)
                + delta * self.sigma_plus * (self.B @ lu_plus.solve(h_plus @ pv))
                + delta * self.sigma_minus * (self.B @ lu_minus.solve(h_minus @ pv))
                + lv * self.m
            )
            return np.concatenate([top, [pv[self.pin]]])

        operator = spla.LinearOperator((n + 1, n + 1), matvec=apply_schur)
        entry = self._p1_cache.get(delta)
        if entry is None or entry.get("stale"):
            entry = {"lu": self._build_p1(delta, h_plus, h_minus), "stale": False}
            self._p1_cache[delta] = entry
        method = "schur"
        iterations = 0
        p = lam = None
        for attempt in range(2):
            count = [0]

            def callback(_):
                count[0] += 1

            precond = spla.LinearOperator(
                (n + 1, n + 1), matvec=entry["lu"].solve
            )
            sol, info = spla.gmres(
                operator,
                f_schur,
                M=precond,
                rtol=self.gmres_rtol,
                atol=0.0,
                restart=self.restart,
                maxiter=1,
                callback=callback,
                callback_type="pr_norm",
            )
            iterations += count[0]
            if info == 0:
                p, lam = sol[:n], float(sol[n])
                if count[0] > P1_REFRESH_ITERS:
                    entry["stale"] = True
                break
            if attempt == 0:
                # preconditioner may be stale; rebuild once at the current
                # coefficients before giving up on the iterative path
                entry = {"lu": self._build_p1(delta, h_plus, h_minus), "stale": False}
                self._p1_cache[delta] = entry
        if p is not None:
            w_plus = y_plus - lu_plus.solve(delta * (h_plus @ p))
            w_minus = y_minus + lu_minus.solve(delta * (h_minus @ p))
            residual = self._residual(
                delta, h_plus, h_minus, g_plus, g_minus, t3, w_plus, w_minus, p, lam
            )
        else:
            residual = np.inf
        if residual > STAGE_RTOL:
            self.fallbacks += 1
            method = "direct"
            w_plus, w_minus, p, lam = self._direct(
                delta, h_plus, h_minus, g_plus, g_minus, t3
            )
            residual = self._residual(
                delta, h_plus, h_minus, g_plus, g_minus, t3, w_plus, w_minus, p, lam
            )
            if residual > STAGE_RTOL:
                raise StageFailureError(
                    stage, f"stage residual {residual:.3e} above {STAGE_RTOL:.1e}"
                )
        self.total_iterations += iterations
        # shift the potential into the weight-zero-mean gauge; the w blocks
        # are invariant (the drift form annihilates constants)
        p = p - (self.m @ p) / self.m_total
        stats = StageStats(
            stage=stage,
            method=method,
            iterations=iterations,
            residual=residual,
            seconds=time.perf_counter() - start,
        )
        return w_plus, w_minus, p, lam, stats


class _CachedBorderedSolver:
    """Direct/iterative solver for a slowly varying bordered matrix.

    The current matrix is always applied exactly; the LU of an earlier
    instance is kept as a GMRES preconditioner and refreshed when the
    iteration stalls or the count degrades.
    """

    def __init__(self, rtol: float = GMRES_RTOL, restart: int = 60, refresh_iters: int = 25):
        self.rtol = rtol
        self.restart = restart
        self.refresh_iters = refresh_iters
        self._lu = None
        self._factored_matrix = None
        self.iterations = 0

    def _refactor(self, bordered: sp.csc_matrix):
        self._lu = spla.splu(bordered, permc_spec=PERMC_SADDLE)
        self._factored_matrix = bordered

    def solve(self, bordered: sp.csc_matrix, rhs: np.ndarray) -> np.ndarray:
        if self._lu is None:
            self._refactor(bordered)
        # repeated solves against the matrix object just factorized (the
        # defect sweeps within one stage) shortcut to the exact LU
        if bordered is self._factored_matrix:
            return self._lu.solve(rhs)
        count = [0]

        def callback(_):
            count[0] += 1

        precond = spla.LinearOperator(bordered.shape, matvec=self._lu.solve)
        sol, info = spla.gmres(
            bordered, rhs, M=precond, rtol=self.rtol, atol=0.0,
            restart=self.restart, maxiter=1,
            callback=callback, callback_type="pr_norm",
        )
        self.iterations += count[0]
        if info != 0 or count[0] > self.refresh_iters:
            self._refactor(bordered)
            if info != 0:
                return self._lu.solve(rhs)
        return sol


class ImexStepper:
    """Applies one IMEX-RK step in the chosen formulation.

    Holds the factorization caches, so reuse one instance for a whole run.
    ``keep_stage_data=True`` attaches full per-stage records to each
    result for verification; leave it off in production loops.
    """

    def __init__(
        self,
        tab: ImexTableau,
        params: PhysicalParams,
        formulation: Formulation,
        ops: FemOperators,
        *,
        keep_stage_data: bool = False,
        audit_interval: int = 100,
        gmres_rtol: float = GMRES_RTOL,
    ):
        if formulation is Formulation.PRIMITIVE:
            params.require_positive_epsilon("the primitive formulation")
        tab.validate()
        diag = np.diag(tab.a_implicit)
        if np.any(diag < 0.0) or np.any(diag[1:] == 0.0):
            raise ValueError(
                f"{tab.name}: implicit diagonal must be positive after stage 1"
            )
        self.tab = tab
        self.params = params
        self.formulation = formulation
        self.ops = ops
        self.keep_stage_data = keep_stage_data
        self.audit_interval = audit_interval
        self._step_count = 0
        self._keff_cache: dict[float, tuple[sp.csr_matrix, object]] = {}
        self._ktilde_cache: dict[float, sp.csr_matrix] = {}
        self.solver = _StageSolver(ops, params, formulation, gmres_rtol=gmres_rtol)
        self._balance = _CachedBorderedSolver()
        self._pin_row = sp.csr_matrix(
            (np.ones(1), (np.zeros(1, dtype=int), [self.solver.pin])),
            shape=(1, ops.n_dofs),
        )
        self._weight_col = sp.csr_matrix(ops.weight.reshape(-1, 1))
        # cross-stage reuse state for the balanced-variable stage solve:
        # the factorization of one stage preconditions the next stages
        # until its iteration count degrades (one-shot refresh) or its
        # certification fails (persistent block, lifted by re-probes)
        self._vqp_lu = None
        self._vqp_refresh_next = False
        self._vqp_probe_blocked = False
        self._vqp_tick = 0
        self._vqp_fail_streak = 0

    # -- helpers -----------------------------------------------------------

    def _combine(self, base: np.ndarray, coeffs: np.ndarray, terms: list[np.ndarray], dt: float):
        out = base.copy()
        for c, term in zip(coeffs, terms):
            if c != 0.0:
                out += (dt * c) * term
        return out

    def _blown(self, reference: float, *arrays: np.ndarray) -> bool:
        return (not _finite(*arrays)) or _inf_norm(*arrays) > BLOWUP_FACTOR * reference

    # -- public API --------------------------------------------------------

    def step(self, state: StateVector, dt: float, reference_norm: float | None = None) -> StepResult:
        if state.formulation is not self.formulation:
            raise ValueError(
                f"stepper is {self.formulation.value}, state is {state.formulation.value}"
            )
        if not dt > 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        if not _finite(state.u1, state.u2, state.phi):
            return StepResult(state, True, [])
        if reference_norm is None:
            reference_norm = max(_inf_norm(state.u1, state.u2, state.phi), np.finfo(float).tiny)
        self._step_count += 1
        return self._step_coupled(state, dt, reference_norm)

    # -- coupled path (eps > 0) -------------------------------------------

    def _step_coupled(self, state: StateVector, dt: float, reference: float) -> StepResult:
        ops, params, tab = self.ops, self.params, self.tab
        quasi = self.formulation is Formulation.QUASI_NEUTRAL
        eps = params.epsilon
        B, L, m = ops.mass.matrix, ops.stiffness.matrix, ops.weight
        a_imp, a_exp = tab.a_implicit, tab.a_explicit
        s = tab.stages
        u1_n, u2_n = state.u1, state.u2
        img1 = B @ u1_n
        img2 = B @ u2_n
        flux1: list[np.ndarray] = []
        flux2: list[np.ndarray] = []  # G2 (quasi-neutral) or the c- flux
        flux3: list[np.ndarray] = []
        stats: list[StageStats] = []
        records: list[StageRecord] = [] if self.keep_stage_data else None
        u1 = u2 = phi = None
        for i in range(s):
            delta = dt * a_imp[i, i]
            if i == 0:
                u1_e, u2_e = u1_n, u2_n
            else:
                u1_e = ops.mass_solver.solve(self._combine(img1, a_exp[i, :i], flux1, dt))
                u2_e = ops.mass_solver.solve(self._combine(img2, a_exp[i, :i], flux2, dt))
            # the predictor potential is never needed: the frozen drift
            # coefficients depend only on the concentration blocks
            r1 = self._combine(img1, a_imp[i, :i], flux1, dt)
            r2 = self._combine(img2, a_imp[i, :i], flux2, dt)
            # an overflow cascade would poison the factorizations below
            if not _finite(u1_e, u2_e, r1, r2):
                return StepResult(state, True, stats, records)
            f3 = np.zeros_like(u1_n)
            if delta > 0.0:
                for j in range(i):
                    if a_imp[i, j] != 0.0:
                        f3 -= (a_imp[i, j] / a_imp[i, i]) * flux3[j]
            if quasi:
                alpha_plus = params.d_plus * (u1_e + eps * u2_e)
                alpha_minus = params.d_minus * (u1_e - eps * u2_e)
            else:
                alpha_plus = params.d_plus * u1_e
                alpha_minus = params.d_minus * u2_e
            if delta > 0.0:
                if quasi and eps <= ASYMPTOTIC_EPS:
                    u1, u2, p, lam_tilde, st = self._stage_asymptotic(
                        i, delta, r1, r2, f3, u1_e, u2_e
                    )
                    stats.append(st)
                    img_q = L @ p + lam_tilde * m - f3  # = B @ charge, exactly
                    flux1.append((B @ u1 - r1) / delta)
                    flux2.append((img_q - r2) / delta)
                    flux3.append(f3 - lam_tilde * m)
                    phi = p
                else:
                    h_plus = ops.space.drift(alpha_plus).matrix
                    h_minus = ops.space.drift(alpha_minus).matrix
                    if quasi:
                        g_plus = r1 + eps * r2
                        g_minus = r1 - eps * r2
                        t3 = (2.0 * eps) * f3
                    else:
                        g_plus, g_minus, t3 = r1, r2, -f3
                    w_plus, w_minus, p, lam_hat, st = self.solver.solve(
                        i, delta, h_plus, h_minus, g_plus, g_minus, t3
                    )
                    stats.append(st)
                    if quasi:
                        u1 = 0.5 * (w_plus + w_minus)
                        lam_tilde = lam_hat / (2.0 * eps)
                        img_q = L @ p + lam_tilde * m - f3  # = B @ charge, exactly
                        u2 = ops.mass_solver.solve(img_q)
                        flux1.append((B @ u1 - r1) / delta)
                        flux2.append((img_q - r2) / delta)
                        flux3.append(f3 - lam_tilde * m)
                    else:
                        u1, u2 = w_plus, w_minus
                        lam_tilde = -lam_hat
                        flux1.append((B @ u1 - r1) / delta)
                        flux2.append((B @ u2 - r2) / delta)
                        flux3.append(f3 - lam_tilde * m)
                    phi = p
            else:
                # zero-diagonal stage: differential blocks are explicit and
                # the potential is projected onto the constraint
                if i != 0:
                    raise StageFailureError(i, "zero diagonal after stage 1 unsupported")
                start = time.perf_counter()
                u1, u2 = u1_n.copy(), u2_n.copy()
                if quasi:
                    phi, lam = ops.poisson_solver.solve_constrained(B @ u2)
                    a1 = params.d_hat * u1_e + eps * params.d_tilde * u2_e
                    a2 = params.d_tilde * u1_e + eps * params.d_hat * u2_e
                    f1 = (
                        -params.d_tilde * (L @ u1)
                        - (eps * params.d_hat) * (L @ u2)
                        - ops.space.drift(a1).matrix @ phi
                    )
                    flux1.append(f1)
                    if eps > 0.0:
                        f2 = (
                            -params.d_hat * (L @ u1)
                            - (eps * params.d_tilde) * (L @ u2)
                            - ops.space.drift(a2).matrix @ phi
                        )
                        flux2.append(f2 / eps)
                    else:
                        # eps-derivative of the charge-row flux; the O(1/eps)
                        # part is the drift balance, which the limit-state
                        # construction satisfies
                        flux2.append(
                            -params.d_tilde * (L @ u2)
                            - ops.space.drift(params.d_hat * u2_e).matrix @ phi
                        )
                    flux3.append(-lam * m)
                else:
                    rho = u1 / params.m_plus - u2 / params.m_minus
                    phi_hat, lam = ops.poisson_solver.solve_constrained(B @ rho)
                    phi = phi_hat / eps
                    flux1.append(
                        -params.d_plus * (L @ u1)
                        - ops.space.drift(alpha_plus).matrix @ phi
                    )
                    flux2.append(
                        -params.d_minus * (L @ u2)
                        + ops.space.drift(alpha_minus).matrix @ phi
                    )
                    flux3.append(lam * m)
                stats.append(
                    StageStats(i, "explicit", 0, 0.0, time.perf_counter() - start)
                )
            if records is not None:
                records.append(
                    StageRecord(
                        u1_pred=np.array(u1_e), u2_pred=np.array(u2_e),
                        u1=u1, u2=u2, phi=phi, r1=r1, r2=r2, f3=f3,
                        flux1=flux1[-1], flux2=flux2[-1], flux3=flux3[-1],
                        delta=delta,
                    )
                )
            # at eps = 0 only the density block is dynamic; the auxiliary
            # blocks of interior stages are balance closures that reach
            # arbitrary magnitudes where the predictor density vanishes,
            # and none of it feeds back (every coupling carries eps)
            if quasi and eps == 0.0:
                blown_here = self._blown(reference, u1)
            else:
                blown_here = self._blown(reference, u1, u2, phi)
            if blown_here:
                return StepResult(state, True, stats, records)
        if tab.stiffly_accurate:
            u1_new, u2_new, phi_new = u1, u2, phi
            if self.audit_interval and self._step_count % self.audit_interval == 0:
                self._audit_update(B, img1, flux1, dt, u1_new)
        else:
            u1_new = ops.mass_solver.solve(self._combine(img1, tab.b, flux1, dt))
            u2_new = ops.mass_solver.solve(self._combine(img2, tab.b, flux2, dt))
            if quasi:
                phi_new, _ = ops.poisson_solver.solve_constrained(B @ u2_new)
            else:
                rho = u1_new / params.m_plus - u2_new / params.m_minus
                phi_hat, _ = ops.poisson_solver.solve_constrained(B @ rho)
                phi_new = phi_hat / eps
        if self._blown(reference, u1_new, u2_new, phi_new):
            return StepResult(state, True, stats, records)
        new_state = StateVector(self.formulation, u1_new, u2_new, phi_new, state.t + dt)
        return StepResult(new_state, False, stats, records)

    def _audit_update(self, B, img1, flux1, dt, u1_new):
        literal = self._combine(img1, self.tab.b, flux1, dt)
        drift = np.linalg.norm(B @ u1_new - literal)
        scale = max(np.linalg.norm(literal), np.finfo(float).tiny)
        if drift > 1e-10 * scale:
            raise SolverError(
                f"stiffly-accurate shortcut diverged from the literal update "
                f"({drift / scale:.3e} relative)"
            )

    # -- asymptotic stage solve (quasi-neutral, eps <= ASYMPTOTIC_EPS) -----

    def _keff(self, delta: float):
        entry = self._keff_cache.get(delta)
        if entry is None:
            mat = (self.ops.mass.matrix + (delta * self.params.d_ambipolar)
                   * self.ops.stiffness.matrix).tocsr()
            lu = spla.splu(mat.tocsc(), permc_spec=PERMC_DEFINITE)
            entry = (mat, lu)
            self._keff_cache[delta] = entry
        return entry

    def _k_tilde(self, delta: float) -> sp.csr_matrix:
        mat = self._ktilde_cache.get(delta)
        if mat is None:
            mat = (
                self.ops.mass.matrix
                + (delta * self.params.d_tilde) * self.ops.stiffness.matrix
            ).tocsr()
            self._ktilde_cache[delta] = mat
        return mat

    def _qn_direct(self, stage, delta, h_plus, h_minus, g_plus, g_minus, t3, f3, sum_r2):
        """Monolithic coupled-template solve, returned in (v, q, p) form.

        The charge is recovered from the constraint row, which is better
        conditioned than differencing the near-equal w blocks.  Raises
        when even the monolithic factorization cannot be certified.
        """
        ops, params = self.ops, self.params
        eps = params.epsilon
        L, m = ops.stiffness.matrix, ops.weight
        w_plus, w_minus, p, _lam_hat = self.solver._direct(
            delta, h_plus, h_minus, g_plus, g_minus, t3
        )
        v = 0.5 * (w_plus + w_minus)
        q_tilde = ops.mass_solver.solve(L @ p - f3)
        lam_tilde = (sum_r2 - float(m @ q_tilde)) / self.solver.m_total
        q = q_tilde + lam_tilde
        residual = self.solver._residual(
            delta, h_plus, h_minus, g_plus, g_minus, t3,
            v + eps * q, v - eps * q, p, (2.0 * eps) * lam_tilde,
        )
        if residual > STAGE_RTOL:
            raise StageFailureError(
                stage, f"stage residual {residual:.3e} above {STAGE_RTOL:.1e}"
            )
        return v, q, p, lam_tilde, residual

    def _stage_asymptotic(self, stage, delta, r1, r2, f3, u1_e, u2_e):
        """One implicit stage in the balanced (v, q, p) variables.

        v = (w+ + w-)/2 is the total concentration and q = (w+ - w-)/(2 eps)
        the rescaled charge; in these variables the stage system carries no
        division by eps anywhere.  eps = 0 uses the exact limit scheme;
        eps > 0 solves the equivalent sparse system with a reusable
        factorization.  Both are certified against the coupled template
        and fall back to its monolithic factorization.
        """
        if self.params.epsilon > 0.0:
            return self._stage_vqp(stage, delta, r1, r2, f3, u1_e, u2_e)
        return self._stage_limit(stage, delta, r1, r2, f3, u1_e, u2_e)

    def _stage_limit(self, stage, delta, r1, r2, f3, u1_e, u2_e):
        """The exact eps = 0 stage.

        One ambipolar diffusion solve, a regularized drift-balance solve
        for the potential (iterated while the regularization error is
        visible), and the algebraic charge recovery with the net charge
        pinned to its exact invariant.
        """
        start = time.perf_counter()
        ops, params = self.ops, self.params
        B, L, m = ops.mass.matrix, ops.stiffness.matrix, ops.weight
        d_eff = params.d_ambipolar
        ratio = params.d_hat / params.d_tilde
        _, keff_lu = self._keff(delta)
        h_c = ops.space.drift(u1_e).matrix
        sum_r2 = float(r2.sum())  # 1.r2 = m.q, the conserved net charge
        n = ops.n_dofs
        p = np.zeros(n)
        q = np.zeros(n)
        lam_tilde = 0.0
        # residual verification happens in the coupled template variables
        t3 = np.zeros_like(r1)
        h_plus = params.d_plus * h_c
        h_minus = params.d_minus * h_c
        iters_before = self._balance.iterations
        coeff_scale = delta * d_eff * float(np.max(np.abs(u1_e)))
        # the drift-balance operator is singular wherever no carriers
        # live; the tiny stiffness floor selects the harmonic extension
        # of the potential there, and the defect iteration below squares
        # the floor away against the exact template
        core = (delta * d_eff) * h_c + (BALANCE_REGULARIZATION * coeff_scale) * L
        bordered = sp.bmat(
            [[core, self._weight_col], [self._pin_row, None]], format="csc"
        )
        v = keff_lu.solve(r1)
        residual = np.inf
        for _sweep in range(MAX_SWEEPS):
            defect = ratio * (B @ v - r1) - (delta * d_eff) * (h_c @ p)
            sol = self._balance.solve(bordered, np.concatenate([defect, [0.0]]))
            p = p + sol[:-1]
            q_tilde = ops.mass_solver.solve(L @ p - f3)
            lam_tilde = (sum_r2 - float(m @ q_tilde)) / self.solver.m_total
            q = q_tilde + lam_tilde
            residual = self.solver._residual(
                delta, h_plus, h_minus, r1, r1, t3, v, v, p, 0.0
            )
            if residual <= STAGE_RTOL:
                break
        method = "asymptotic"
        if residual > STAGE_RTOL:
            self.solver.fallbacks += 1
            method = "direct"
            v, q, p, lam_tilde, residual = self._qn_direct(
                stage, delta, h_plus, h_minus, r1, r1, t3, f3, sum_r2
            )
        p = p - (m @ p) / self.solver.m_total
        stats = StageStats(
            stage=stage,
            method=method,
            iterations=self._balance.iterations - iters_before,
            residual=residual,
            seconds=time.perf_counter() - start,
        )
        return v, q, p, lam_tilde, stats

    def _assemble_vqp(self, delta, k_tilde, h_c, h_q):
        eps = self.params.epsilon
        d_hat, d_tilde = self.params.d_hat, self.params.d_tilde
        B, L = self.ops.mass.matrix, self.ops.stiffness.matrix
        n = self.ops.n_dofs
        col0 = sp.csr_matrix((n, 1))
        pin_row = sp.csr_matrix(
            (np.ones(1), (np.zeros(1, dtype=int), [2 * n + self.solver.pin])),
            shape=(1, 3 * n + 1),
        )
        return sp.vstack(
            [
                sp.hstack(
                    [k_tilde, (eps * delta * d_hat) * L,
                     delta * (d_hat * h_c + (eps * d_tilde) * h_q), col0]
                ),
                sp.hstack(
                    [(delta * d_hat) * L, eps * k_tilde,
                     delta * (d_tilde * h_c + (eps * d_hat) * h_q), col0]
                ),
                sp.hstack([sp.csr_matrix((n, n)), -B, L, self._weight_col]),
                pin_row,
            ]
        ).tocsc()

    def _stage_vqp(self, stage, delta, r1, r2, f3, u1_e, u2_e):
        """One implicit stage at 0 < eps <= the asymptotic cutoff.

        Solves the balanced-variable form of the stage system, whose
        conditioning is set by the data (carrier floor) rather than by
        1/eps.  The sparse factorization of one stage is reused for the
        following stages as a GMRES preconditioner; an iterative
        refinement pass removes the factorization's backward error, which
        otherwise sits right at the certification threshold.  States with
        carrier-free regions make the reuse useless (the near-kernel
        turns over every step), so failed probes switch to
        refactorize-first and, if even fresh factorizations cannot be
        certified, to the monolithic template solve, re-probing
        periodically.
        """
        start = time.perf_counter()
        ops, params = self.ops, self.params
        eps = params.epsilon
        B, L, m = ops.mass.matrix, ops.stiffness.matrix, ops.weight
        n = ops.n_dofs
        d_hat, d_tilde = params.d_hat, params.d_tilde
        h_c = ops.space.drift(u1_e).matrix
        h_q = ops.space.drift(u2_e).matrix
        k_tilde = self._k_tilde(delta)
        pin = self.solver.pin
        b = np.concatenate([r1, eps * r2, f3, [0.0]])

        def apply_system(x):
            v, q, p = x[:n], x[n : 2 * n], x[2 * n : 3 * n]
            hcp = h_c @ p
            hqp = h_q @ p
            row1 = (
                k_tilde @ v
                + (eps * delta * d_hat) * (L @ q)
                + delta * (d_hat * hcp + (eps * d_tilde) * hqp)
            )
            row2 = (
                (delta * d_hat) * (L @ v)
                + eps * (k_tilde @ q)
                + delta * (d_tilde * hcp + (eps * d_hat) * hqp)
            )
            row3 = -(B @ q) + L @ p + x[3 * n] * m
            return np.concatenate([row1, row2, row3, [p[pin]]])

        # certification data in the coupled template variables
        g_plus = r1 + eps * r2
        g_minus = r1 - eps * r2
        t3 = (2.0 * eps) * f3
        h_plus = params.d_plus * (h_c + eps * h_q)
        h_minus = params.d_minus * (h_c - eps * h_q)

        def certify(x):
            v, q, p = x[:n], x[n : 2 * n], x[2 * n : 3 * n]
            return self.solver._residual(
                delta, h_plus, h_minus, g_plus, g_minus, t3,
                v + eps * q, v - eps * q, p, (2.0 * eps) * x[3 * n],
            )

        def polish(x):
            x = x - self._vqp_lu.solve(apply_system(x) - b)
            res = certify(x)
            for _ in range(REFINEMENT_PASSES - 1):
                if res <= STAGE_RTOL:
                    break
                x = x - self._vqp_lu.solve(apply_system(x) - b)
                res = certify(x)
            return x, res

        self._vqp_tick += 1
        reprobe = self._vqp_tick % VQP_REPROBE_PERIOD == 0
        dead = self._vqp_fail_streak >= 2 and not reprobe
        its = 0
        x = None
        residual = np.inf
        probe = (
            self._vqp_lu is not None
            and not dead
            and not self._vqp_refresh_next
            and (not self._vqp_probe_blocked or reprobe)
        )
        if probe:
            operator = spla.LinearOperator((3 * n + 1, 3 * n + 1), matvec=apply_system)
            precond = spla.LinearOperator(
                (3 * n + 1, 3 * n + 1), matvec=self._vqp_lu.solve
            )
            count = [0]

            def callback(_):
                count[0] += 1

            sol, _info = spla.gmres(
                operator, b, M=precond, rtol=VQP_GMRES_RTOL, atol=0.0,
                restart=VQP_RESTART, maxiter=1,
                callback=callback, callback_type="pr_norm",
            )
            its = count[0]
            x, residual = polish(sol)
            if residual <= STAGE_RTOL:
                self._vqp_probe_blocked = False
                # a slow probe means the factorization has gone stale;
                # refresh it next stage, then resume probing
                self._vqp_refresh_next = its > VQP_STALE_ITERS
        if residual > STAGE_RTOL and not dead:
            self._vqp_lu = spla.splu(
                self._assemble_vqp(delta, k_tilde, h_c, h_q), permc_spec=PERMC_SADDLE
            )
            x, residual = polish(self._vqp_lu.solve(b))
            self._vqp_refresh_next = False
            if probe:
                # a one-stage-old factorization already failed to converge,
                # so the system is drifting too fast to probe every stage;
                # refactorize first until a periodic re-probe succeeds
                self._vqp_probe_blocked = True
        method = "asymptotic"
        if residual <= STAGE_RTOL:
            self._vqp_fail_streak = 0
            v, q, p = x[:n], x[n : 2 * n], x[2 * n : 3 * n]
            lam_tilde = float(x[3 * n])
        else:
            self._vqp_fail_streak += 1
            self.solver.fallbacks += 1
            method = "direct"
            v, q, p, lam_tilde, residual = self._qn_direct(
                stage, delta, h_plus, h_minus, g_plus, g_minus, t3, f3,
                float(r2.sum()),
            )
        p = p - (m @ p) / self.solver.m_total
        stats = StageStats(
            stage=stage,
            method=method,
            iterations=its,
            residual=residual,
            seconds=time.perf_counter() - start,
        )
        return v, q, p, lam_tilde, stats


class SplitStepper:
    """Classical splitting: freeze the potential, then advance the species.

    Each step first solves the potential from the current concentrations,
    then performs one trapezoidal update per species with the advection
    operator frozen at that potential; the two species solves decouple.
    The stored potential is the one the step used (it lags the new
    concentrations by construction of the splitting).

    ``implicit_weight``/``explicit_weight`` default to the trapezoidal
    1/2, 1/2; (1, 0) gives the backward-Euler variant used for
    cross-checks.
    """

    def __init__(
        self,
        params: PhysicalParams,
        ops: FemOperators,
        *,
        implicit_weight: float = 0.5,
        explicit_weight: float = 0.5,
    ):
        params.require_positive_epsilon("the split scheme")
        self.params = params
        self.ops = ops
        self.formulation = Formulation.PRIMITIVE
        self.implicit_weight = implicit_weight
        self.explicit_weight = explicit_weight

    def step(self, state: StateVector, dt: float, reference_norm: float | None = None) -> StepResult:
        if state.formulation is not Formulation.PRIMITIVE:
            raise ValueError("the split scheme runs on the primitive blocks only")
        if not dt > 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        if reference_norm is None:
            reference_norm = max(_inf_norm(state.u1, state.u2, state.phi), np.finfo(float).tiny)
        ops, params = self.ops, self.params
        B, L = ops.mass.matrix, ops.stiffness.matrix
        start = time.perf_counter()
        rho = state.u1 / params.m_plus - state.u2 / params.m_minus
        phi_hat, _ = ops.poisson_solver.solve_constrained(B @ rho)
        phi = phi_hat / params.epsilon
        if not _finite(phi):
            return StepResult(state, True, [])
        adv = ops.space.advection(phi).matrix
        new = []
        for c, d, sign in ((state.u1, params.d_plus, 1.0), (state.u2, params.d_minus, -1.0)):
            transport = d * (L + sign * adv)
            lhs = B + (self.implicit_weight * dt) * transport
            rhs = B @ c - (self.explicit_weight * dt) * (transport @ c)
            new.append(solve_sparse(lhs, rhs))
        stats = [StageStats(0, "direct", 0, 0.0, time.perf_counter() - start)]
        if (not _finite(*new)) or _inf_norm(*new) > BLOWUP_FACTOR * reference_norm:
            return StepResult(state, True, stats)
        new_state = StateVector(
            Formulation.PRIMITIVE, new[0], new[1], phi, state.t + dt
        )
        return StepResult(new_state, False, stats)


def imex_step(
    state: StateVector,
    dt: float,
    tab: ImexTableau,
    params: PhysicalParams,
    formulation: Formulation,
    ops: FemOperators,
    **options,
) -> StepResult:
    """One-shot step; for time loops build an ImexStepper once instead."""
    return ImexStepper(tab, params, formulation, ops, **options).step(state, dt)


def split_step(
    state: StateVector, dt: float, params: PhysicalParams, ops: FemOperators
) -> StepResult:
    return SplitStepper(params, ops).step(state, dt)


def advance(
    stepper,
    state: StateVector,
    dt: float,
    n_steps: int,
    *,
    on_step=None,
) -> Trajectory:
    """Repeated stepping with per-step diagnostics and early blow-up exit.

    The blow-up reference norm is frozen at the starting state.  ``on_step``
    is called as ``on_step(step_index, state, diag)`` after every step.
    """
    ops, params = stepper.ops, stepper.params
    series = [dict(step=0, t=state.t, **diagnostics(state, ops, params))]
    reference = max(_inf_norm(state.u1, state.u2, state.phi), np.finfo(float).tiny)
    step_seconds: list[float] = []
    blew_up = False
    blow_up_step = None
    n_done = 0
    stage_solves = 0
    gmres_total = 0
    fallbacks = 0
    max_residual = 0.0
    wall_start = time.perf_counter()
    for k in range(1, n_steps + 1):
        t0 = time.perf_counter()
        result = stepper.step(state, dt, reference_norm=reference)
        step_seconds.append(time.perf_counter() - t0)
        stage_solves += len(result.stage_stats)
        for st in result.stage_stats:
            gmres_total += st.iterations
            max_residual = max(max_residual, st.residual)
            if st.method == "direct":
                fallbacks += 1
        if result.blew_up:
            blew_up = True
            blow_up_step = k
            logger.warning("blow-up at step %d (t = %.6g)", k, state.t + dt)
            break
        state = result.state
        n_done = k
        diag = diagnostics(state, ops, params)
        series.append(dict(step=k, t=state.t, **diag))
        if on_step is not None:
            on_step(k, state, diag)
    return Trajectory(
        state=state,
        series=series,
        blew_up=blew_up,
        blow_up_step=blow_up_step,
        n_steps_done=n_done,
        wall_seconds=time.perf_counter() - wall_start,
        step_seconds=step_seconds,
        stats=dict(
            stage_solves=stage_solves,
            gmres_iterations=gmres_total,
            fallbacks=fallbacks,
            max_stage_residual=max_residual,
        ),
    )
