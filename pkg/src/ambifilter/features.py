"""Polynomial feature maps and ridge regression for the backward solvers.

Conditional expectations E[. | F_t] are approximated by projecting on
monomials of the per-path state available at t. Feature maps are named so
regression tables can be evaluated later (sign policies re-use them):

    poly_x    monomials in X
    poly_xm   monomials in (X, M)
    poly_xu   monomials in (X, u)
    poly_xmu  monomials in (X, M, u)

The design always contains the constant monomial. Columns are standardized
before the ridge solve; zero-variance columns are dropped (at t=0 every path
is identical, so the design collapses to the intercept and the projection is
the plain mean, as it should be).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import Optional

import numpy as np
from scipy.linalg import qr

from .errors import IllConditionedBasisError, InvalidArgumentError

FEATURE_MAPS = {
    "poly_x": ("x",),
    "poly_xm": ("x", "m"),
    "poly_xu": ("x", "u"),
    "poly_xmu": ("x", "m", "u"),
}

COND_LIMIT = 1e12


@lru_cache(maxsize=None)
def monomial_exponents(n_vars: int, degree: int) -> tuple[tuple[int, ...], ...]:
    """All exponent tuples with total degree <= degree, constant first,
    ordered by total degree then lexicographically (deterministic)."""
    exps = [e for e in product(range(degree + 1), repeat=n_vars) if sum(e) <= degree]
    exps.sort(key=lambda e: (sum(e), e))
    return tuple(exps)


@dataclass(frozen=True)
class RegressionBasis:
    """Feature set used by the least-squares Monte Carlo solvers."""

    feature_map_id: str = "poly_xu"
    degree: int = 3
    ridge_lambda: Optional[float] = None  # None -> 1e-8 * n_paths

    def __post_init__(self):
        if self.feature_map_id not in FEATURE_MAPS:
            raise InvalidArgumentError(
                f"unknown feature map {self.feature_map_id!r}; known: {sorted(FEATURE_MAPS)}"
            )
        if self.degree < 0:
            raise InvalidArgumentError("degree must be >= 0")
        if self.ridge_lambda is not None and self.ridge_lambda < 0:
            raise InvalidArgumentError("ridge_lambda must be >= 0")

    @property
    def variables(self) -> tuple[str, ...]:
        return FEATURE_MAPS[self.feature_map_id]

    @property
    def n_features(self) -> int:
        return len(monomial_exponents(len(self.variables), self.degree))

    def design(self, values: dict[str, np.ndarray]) -> np.ndarray:
        """Monomial design matrix, one row per path."""
        cols = []
        for v in self.variables:
            if v not in values:
                raise InvalidArgumentError(f"feature map needs variable {v!r}")
            cols.append(np.asarray(values[v], dtype=float).ravel())
        n = cols[0].size
        exps = monomial_exponents(len(cols), self.degree)
        F = np.empty((n, len(exps)))
        for j, e in enumerate(exps):
            col = np.ones(n)
            for c, p in zip(cols, e):
                if p:
                    col = col * c**p
            F[:, j] = col
        return F

    def effective_lambda(self, n_paths: int) -> float:
        return 1e-8 * n_paths if self.ridge_lambda is None else self.ridge_lambda


@dataclass(frozen=True)
class FrozenRegression:
    """A fitted per-step regression, evaluable on new designs."""

    mask: np.ndarray      # bool, columns kept beyond the intercept
    mu: np.ndarray        # means of kept columns
    sd: np.ndarray        # stds of kept columns
    coef: np.ndarray      # [intercept, standardized-column coefficients]

    def predict(self, F: np.ndarray) -> np.ndarray:
        out = np.full(F.shape[0], self.coef[0])
        if self.mask.any():
            S = (F[:, self.mask] - self.mu) / self.sd
            out = out + S @ self.coef[1:]
        return out


def fit_ridge(F: np.ndarray, y: np.ndarray, lam: float) -> FrozenRegression:
    """Ridge fit on a standardized design.

    Structural rank deficiency is expected (every path starts at the same
    point, so early-step monomials coincide exactly); linearly dependent
    columns are dropped by a rank-revealing QR before the solve. The
    ill-conditioned error is reserved for designs whose independent part is
    still numerically singular beyond the ridge guard.
    """
    n = F.shape[0]
    mu_all = F.mean(axis=0)
    sd_all = F.std(axis=0)
    mask = sd_all > 1e-12
    mask[0] = False  # column 0 is the constant monomial, absorbed by the intercept
    mu, sd = mu_all[mask], sd_all[mask]
    if mask.any():
        S = (F[:, mask] - mu) / sd
        D = np.column_stack([np.ones(n), S])
    else:
        D = np.ones((n, 1))
    k = D.shape[1]
    keep = np.arange(k)
    if k > 1:
        _, R, piv = qr(D, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int((diag > diag[0] * 1e-10).sum()) if diag[0] > 0 else 1
        keep = np.sort(piv[:rank])
        D = D[:, keep]
    sv = np.linalg.svd(D, compute_uv=False)
    cond = np.inf if sv[-1] == 0.0 else sv[0] / sv[-1]
    if cond > COND_LIMIT:
        raise IllConditionedBasisError(
            f"design condition number {cond:.3e} exceeds {COND_LIMIT:.0e}"
        )
    penalty = lam * np.eye(D.shape[1])
    if keep[0] == 0:
        penalty[0, 0] = 0.0  # never shrink the intercept
    gram = D.T @ D + penalty
    coef_kept = np.linalg.solve(gram, D.T @ y)
    coef = np.zeros(k)
    coef[keep] = coef_kept
    return FrozenRegression(mask=mask, mu=mu, sd=sd, coef=coef)


def check_basis_size(basis: RegressionBasis, n_paths: int) -> None:
    """Well-posedness guard: 1 <= n_features <= n_paths / 10."""
    k = basis.n_features
    if k < 1:
        raise IllConditionedBasisError("basis has no features")
    if k > n_paths / 10:
        raise IllConditionedBasisError(
            f"basis has {k} features for {n_paths} paths; need n_paths >= 10 * n_features"
        )
