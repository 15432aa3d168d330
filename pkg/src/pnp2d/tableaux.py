"""IMEX Runge-Kutta double Butcher tableaux I1-I6.

Each scheme pairs a strictly lower triangular explicit tableau with a
diagonally implicit one. The update uses a single shared weight vector b
applied to the stage flux products, so only one b row is stored; it is the
weight row consistent with the implicit tableau, which satisfies the order
conditions against both abscissae families.

Registry:

* I1  IMEX-H(2,2,2)     explicit Heun with an A-stable DIRK, order 2
* I2  IMEX-SA(2,2,2)    L-stable, stiffly accurate implicit part, order 2
* I3  CK(3,3,2)         L-stable, globally stiffly accurate, type II, order 2
* I4  IMEX-SSP2(3,3,2)  globally stiffly accurate, type I, order 2
* I5  IMEX-SSP3(4,3,3)  SSP explicit part, order 3
* I6  SI-IMEX(4,4,3)    L-stable, stiffly accurate, type I, order 3

The I3 weight b1 is 1/4 + gamma/2. Sources occasionally transcribe it with a
flipped sign, which breaks sum(b) = 1; the value used here is the unique one
consistent with the remaining printed entries, second order, and stiff
accuracy. The I6 explicit coefficients are known to 10 decimal digits only,
so order conditions involving the explicit abscissae are validated at 2e-9
instead of 1e-12 for that scheme.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GAMMA_L_STABLE = (2.0 - np.sqrt(2.0)) / 2.0  # 0.2928932188134524...

#: Tolerance for order conditions built from exactly representable entries.
ORDER_CONDITION_TOL = 1e-12
#: Tolerance for I6 conditions involving its 10-digit explicit constants.
TRUNCATED_DIGITS_TOL = 2e-9


class TableauError(ValueError):
    """A tableau violates its structural or order conditions."""


@dataclass(frozen=True)
class ImexTableau:
    """Double Butcher tableau with a shared quadrature weight row.

    Abscissae are derived row sums, never stored independently.
    """

    name: str
    order: int
    a_explicit: np.ndarray
    a_implicit: np.ndarray
    b: np.ndarray
    label: str = ""
    explicit_tol: float = field(default=ORDER_CONDITION_TOL)

    @property
    def stages(self) -> int:
        return len(self.b)

    @property
    def c_explicit(self) -> np.ndarray:
        return self.a_explicit.sum(axis=1)

    @property
    def c_implicit(self) -> np.ndarray:
        return self.a_implicit.sum(axis=1)

    @property
    def stiffly_accurate(self) -> bool:
        return bool(np.allclose(self.b, self.a_implicit[-1], rtol=0, atol=1e-14))

    def validate(self) -> None:
        s = self.stages
        ae, ai, b = self.a_explicit, self.a_implicit, self.b
        if ae.shape != (s, s) or ai.shape != (s, s):
            raise TableauError(f"{self.name}: tableau shapes do not match {s} stages")
        if np.any(np.triu(ae) != 0.0):
            raise TableauError(f"{self.name}: explicit tableau must be strictly lower triangular")
        if np.any(np.triu(ai, k=1) != 0.0):
            raise TableauError(f"{self.name}: implicit tableau must be lower triangular")
        checks = [("sum(b) = 1", abs(b.sum() - 1.0), ORDER_CONDITION_TOL)]
        if self.order >= 2:
            checks += [
                ("b.c_implicit = 1/2", abs(b @ self.c_implicit - 0.5), ORDER_CONDITION_TOL),
                ("b.c_explicit = 1/2", abs(b @ self.c_explicit - 0.5), self.explicit_tol),
            ]
        if self.order >= 3:
            checks += [
                ("b.c_implicit^2 = 1/3", abs(b @ self.c_implicit ** 2 - 1 / 3), ORDER_CONDITION_TOL),
                ("b.c_explicit^2 = 1/3", abs(b @ self.c_explicit ** 2 - 1 / 3), self.explicit_tol),
                ("b.A.c = 1/6", abs(b @ ai @ self.c_implicit - 1 / 6), ORDER_CONDITION_TOL),
                ("b.Ae.c = 1/6", abs(b @ ae @ self.c_implicit - 1 / 6), self.explicit_tol),
            ]
        for what, defect, tol in checks:
            if not defect <= tol:
                raise TableauError(f"{self.name}: order condition {what} off by {defect:.3e}")


def _tab(name, order, a_explicit, a_implicit, b, label, explicit_tol=ORDER_CONDITION_TOL):
    tab = ImexTableau(
        name=name,
        order=order,
        a_explicit=np.asarray(a_explicit, dtype=float),
        a_implicit=np.asarray(a_implicit, dtype=float),
        b=np.asarray(b, dtype=float),
        label=label,
        explicit_tol=explicit_tol,
    )
    tab.validate()
    return tab


def _build_registry() -> dict[str, ImexTableau]:
    g = GAMMA_L_STABLE

    i1 = _tab(
        "I1", 2,
        [[0.0, 0.0], [1.0, 0.0]],
        [[0.5, 0.0], [0.0, 0.5]],
        [0.5, 0.5],
        "IMEX-H(2,2,2): Heun with A-stable DIRK, type I",
    )
    i2 = _tab(
        "I2", 2,
        [[0.0, 0.0], [1.0 / (2.0 * g), 0.0]],
        [[g, 0.0], [1.0 - g, g]],
        [1.0 - g, g],
        "IMEX-SA(2,2,2): L-stable, stiffly accurate",
    )
    i3 = _tab(
        "I3", 2,
        [[0.0, 0.0, 0.0], [2.0 / 3.0, 0.0, 0.0], [0.25, 0.75, 0.0]],
        [[0.0, 0.0, 0.0], [2.0 / 3.0 - g, g, 0.0], [0.25 + 0.5 * g, 0.75 - 1.5 * g, g]],
        [0.25 + 0.5 * g, 0.75 - 1.5 * g, g],
        "CK(3,3,2): L-stable, globally stiffly accurate, type II",
    )
    i4 = _tab(
        "I4", 2,
        [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.5, 0.5, 0.0]],
        [[0.25, 0.0, 0.0], [0.0, 0.25, 0.0], [1 / 3, 1 / 3, 1 / 3]],
        [1 / 3, 1 / 3, 1 / 3],
        "IMEX-SSP2(3,3,2): globally stiffly accurate, type I",
    )
    alpha = 0.24169426078821
    beta = 0.06042356519705
    eta = 0.12915286960590
    i5 = _tab(
        "I5", 3,
        [
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.25, 0.25, 0.0],
        ],
        [
            [alpha, 0.0, 0.0, 0.0],
            [-alpha, alpha, 0.0, 0.0],
            [0.0, 1.0 - alpha, alpha, 0.0],
            [beta, eta, 0.5 - alpha - beta - eta, alpha],
        ],
        [0.0, 1 / 6, 1 / 6, 2 / 3],
        "IMEX-SSP3(4,3,3): SSP explicit part, type I",
    )
    a6 = 1.208496649176
    b6 = 0.717933260754
    d6 = 1.243893189
    e6 = -0.644363170684
    g6 = 0.435866521508
    m6 = 0.282066739245
    x6 = -0.5259599287
    z6 = 0.6304125582
    t6 = 0.7865807402
    th6 = -0.4169932983
    i6 = _tab(
        "I6", 3,
        [
            [0.0, 0.0, 0.0, 0.0],
            [g6, 0.0, 0.0, 0.0],
            [d6, x6, 0.0, 0.0],
            [z6, t6, th6, 0.0],
        ],
        [
            [g6, 0.0, 0.0, 0.0],
            [0.0, g6, 0.0, 0.0],
            [0.0, m6, g6, 0.0],
            [0.0, a6, e6, g6],
        ],
        [0.0, a6, e6, g6],
        "SI-IMEX(4,4,3): L-stable, stiffly accurate, type I",
        explicit_tol=TRUNCATED_DIGITS_TOL,
    )
    return {t.name: t for t in (i1, i2, i3, i4, i5, i6)}


TABLEAUX: dict[str, ImexTableau] = _build_registry()


def tableau(name: str) -> ImexTableau:
    """Look up a registry tableau by id (I1 through I6)."""
    try:
        return TABLEAUX[name]
    except KeyError:
        valid = ", ".join(sorted(TABLEAUX))
        raise ValueError(f"unknown scheme {name!r}; valid ids are {valid}") from None


def implicit_euler() -> ImexTableau:
    """Single-stage implicit Euler as a degenerate IMEX tableau (order 1)."""
    tab = ImexTableau(
        name="BE",
        order=1,
        a_explicit=np.zeros((1, 1)),
        a_implicit=np.ones((1, 1)),
        b=np.ones(1),
        label="implicit Euler (testing aid)",
    )
    tab.validate()
    return tab
