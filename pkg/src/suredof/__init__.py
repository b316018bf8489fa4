"""Partly-smooth regularized regression, local sensitivity analysis and
SURE/DOF risk estimation.

The package is organized around six pieces:

* ``linop``       linear operators (designs and analysis operators) with
                  exact adjoints,
* ``penalty``     partly-smooth regularizers, their proximity operators and
                  active-manifold snapshots,
* ``solver``      Douglas-Rachford splitting and the tangent-constrained
                  (saddle) linear system,
* ``sensitivity`` restricted injectivity, solution Jacobians, divergence of
                  the prediction map and constructive solution repair,
* ``risk``        SURE / GSURE estimators and risk curves over a grid of
                  regularization weights,
* ``harness``     configuration, experiment runner, invariant checks and the
                  command line front end (``cli``, ``config``, ``experiments``,
                  ``checks``).
"""

from . import linop, penalty, solver, sensitivity, risk

__version__ = "0.1.0"

__all__ = ["linop", "penalty", "solver", "sensitivity", "risk", "__version__"]
