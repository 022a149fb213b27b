"""Ambiguity filtering: robust estimation of f(X_t) from noisy observations
when the signal drift is only known up to a Girsanov perturbation class.

Modules
-------
model       filtering model, drift policies, forward Monte Carlo
filtering   weighted-particle unnormalized/normalized filter
bsde        least-squares Monte Carlo backward solvers and derivative checks
minimax     cost evaluation, fixed-point driver, saddle diagnostics
oracles     closed-form and brute-force references used by the test suite
cli         config-driven experiment runner
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
