"""Finite-element Poisson-Nernst-Planck solver on a square with a circular hole.

Two formulations of the two-species drift-diffusion / Poisson system are
provided: the primitive one in the concentrations (c+, c-) and a
quasi-neutral one in the rescaled variables (C, Q) that stays well behaved
as the Debye parameter epsilon tends to zero. Time integration uses a family
of IMEX Runge-Kutta schemes plus a classical operator-split reference scheme.
"""

__version__ = "0.1.0"
