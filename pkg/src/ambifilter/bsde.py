"""Least-squares Monte Carlo backward solvers.

Two backward systems are solved on simulated forward paths, with conditional
expectations projected on per-step polynomial features:

* the worst-case value y of the running squared error, whose driver picks up
  k|z| from maximizing theta*z over |theta| <= k. The backward recursion is

      z_t ~ E[y_{t+dt} dW / dt | F_t],    z~_t ~ E[y_{t+dt} dB / dt | F_t],
      y_t = E[y_{t+dt} | F_t] + (|f(X_t) - u_t|^2 + k |z_t|) dt,   y_T = 0,

  so y_0 estimates the supremum of the cost over the ambiguity class. (The
  +k|z_t| sign follows the sup derivation and makes y_0 nondecreasing in k;
  see the worst-case driver note in the README.)

* the adjoint system (p, q) / (P, Q) of the weighted mean-field control
  problem, solved under the reference measure where the observation is a free
  Brownian motion. The P-driver is implemented in three variants that differ
  in the (p, q) coupling terms; a finite-difference Gateaux check against the
  simulated cost adjudicates between them (see gateaux_fd / gateaux_adjoint).

Explicit scheme throughout: martingale coefficients are regressed first, the
drivers are then evaluated at the regressed values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError, ShapeError
from .features import FrozenRegression, RegressionBasis, check_basis_size, fit_ridge
from .filtering import run_filter_bank
from .model import ModelSpec, PathBundle, TimeGrid, build_time_grid, simulate_bundle
from .policies import DriftPolicy, perturbed_policy

ADJOINT_VARIANTS = ("eq_main", "eq_alt", "derived")

# Salt for the nested filter clouds inside cost evaluations; anything fixed
# works, it only has to be distinct from caller-level salts.
NESTED_FILTER_SALT = 104729


@dataclass(frozen=True)
class BsdeSolution:
    y0: float
    y_tables: tuple[FrozenRegression, ...]   # per step; terminal entry is zero
    z_tables: tuple[FrozenRegression, ...]
    zt_tables: tuple[FrozenRegression, ...]
    grid: TimeGrid
    basis: RegressionBasis
    y_mean_path: np.ndarray                  # E[y_t] per grid time, diagnostics


@dataclass(frozen=True)
class AdjointSolution:
    p_tables: tuple[FrozenRegression, ...]
    q_tables: tuple[FrozenRegression, ...]
    P_tables: tuple[FrozenRegression, ...]
    Q_tables: tuple[FrozenRegression, ...]
    grid: TimeGrid
    basis: RegressionBasis
    variant: str
    p_vals: np.ndarray                       # (n_paths, n_steps + 1) path values
    q_vals: np.ndarray
    P_vals: np.ndarray
    Q_vals: np.ndarray


@dataclass(frozen=True)
class VariationalPaths:
    X1: np.ndarray
    M1: np.ndarray


@dataclass(frozen=True)
class GateauxEstimate:
    value: float
    se: float
    per_path: np.ndarray
    slopes: tuple[float, ...]        # central-difference slope per epsilon
    richardson_error: float

    def __float__(self) -> float:
        return self.value


_ZERO_REG = FrozenRegression(mask=np.zeros(1, dtype=bool), mu=np.empty(0),
                             sd=np.empty(0), coef=np.zeros(1))


def _require_h1(model: ModelSpec, what: str) -> None:
    if not model.h1_compliant:
        raise InvalidArgumentError(
            f"{what} requires bounded coefficients; presets tagged for oracle "
            "validation only are not accepted here"
        )


def solve_worst_value(paths: PathBundle, u_vals: np.ndarray, model: ModelSpec,
                      basis: Optional[RegressionBasis] = None) -> BsdeSolution:
    """Backward solve of the worst-case value on base-measure paths.

    `paths` must be simulated under P (unperturbed dynamics, full (W, B)
    noise); `u_vals` is the candidate control evaluated per path and grid
    time (a causal functional of the observation path).
    """
    _require_h1(model, "solve_worst_value")
    if paths.measure_tag != "P":
        raise InvalidArgumentError("worst-case value paths must be simulated under P")
    basis = basis or RegressionBasis(feature_map_id="poly_xu", degree=3)
    grid = paths.grid
    n, steps = paths.X.shape[0], grid.n_steps
    if u_vals.shape != paths.X.shape:
        raise ShapeError("u_vals must align with the path arrays")
    check_basis_size(basis, n)
    lam = basis.effective_lambda(n)
    dt = grid.dt
    dW, dB = paths.noise.dW, paths.noise.dB
    k = model.k

    y = np.zeros(n)
    y_tabs = [_ZERO_REG] * (steps + 1)
    z_tabs = [_ZERO_REG] * (steps + 1)
    zt_tabs = [_ZERO_REG] * (steps + 1)
    y_mean = np.zeros(steps + 1)
    for j in range(steps - 1, -1, -1):
        F = basis.design({"x": paths.X[:, j], "u": u_vals[:, j],
                          "m": paths.M[:, j]})
        y_reg = fit_ridge(F, y, lam)
        cont = y_reg.predict(F)
        # center y before the increment regressions: same conditional
        # expectation, but the removed level variance would otherwise feed a
        # Jensen bias into y through k|z|
        z_reg = fit_ridge(F, (y - cont) * dW[:, j] / dt, lam)
        zt_reg = fit_ridge(F, (y - cont) * dB[:, j] / dt, lam)
        z = z_reg.predict(F)
        err = model.f.value(paths.X[:, j]) - u_vals[:, j]
        y = cont + (err * err + k * np.abs(z)) * dt
        y_tabs[j], z_tabs[j], zt_tabs[j] = y_reg, z_reg, zt_reg
        y_mean[j] = y.mean()
    return BsdeSolution(y0=float(y.mean()), y_tables=tuple(y_tabs),
                        z_tables=tuple(z_tabs), zt_tables=tuple(zt_tabs),
                        grid=grid, basis=basis, y_mean_path=y_mean)


def _adjoint_driver(variant: str, bprime, sprime, hprime, fprime, hval, fval,
                    u, M, theta, P_cont, Q, p, q):
    """dP = -driver dt + Q dW~; the three variants differ in the (p, q)
    coupling, which the Gateaux duality check adjudicates."""
    src = fprime * M * (fval - u)
    if variant == "eq_main":
        return (bprime + sprime * theta) * P_cont + sprime * Q \
            - hprime * M * (q + hval * p) + src
    if variant == "eq_alt":
        return (bprime - sprime * theta) * P_cont + sprime * Q \
            - hprime * M * q - hprime * hval * p + src
    if variant == "derived":
        return (bprime + sprime * theta) * P_cont + sprime * Q \
            + hprime * M * q + src
    raise InvalidArgumentError(f"unknown adjoint variant {variant!r}; "
                               f"choose from {ADJOINT_VARIANTS}")


def solve_adjoint(paths: PathBundle, u_vals: np.ndarray, model: ModelSpec,
                  policy: DriftPolicy, basis: Optional[RegressionBasis] = None,
                  variant: str = "eq_main") -> AdjointSolution:
    """Backward solve of the adjoint pair on reference-measure paths.

    `paths` must be simulated under Q_tilde (decoupled observation);
    `u_vals` is the conditional-expectation ratio produced by the filter on
    each path. The p-equation driver is h q + (f - u)^2 / 2 in every variant.
    """
    _require_h1(model, "solve_adjoint")
    if paths.measure_tag != "Q_tilde":
        raise InvalidArgumentError("adjoint paths must be simulated under Q_tilde")
    if variant not in ADJOINT_VARIANTS:
        raise InvalidArgumentError(f"unknown adjoint variant {variant!r}; "
                                   f"choose from {ADJOINT_VARIANTS}")
    if u_vals is None:
        raise InvalidArgumentError("u_vals (per-path filter values) are required")
    if u_vals.shape != paths.X.shape:
        raise ShapeError("u_vals must align with the path arrays")
    basis = basis or RegressionBasis(feature_map_id="poly_xm", degree=2)
    grid = paths.grid
    n, steps = paths.X.shape[0], grid.n_steps
    check_basis_size(basis, n)
    lam = basis.effective_lambda(n)
    dt = grid.dt
    dW = paths.noise.dW                       # W~ increments under Q_tilde
    dY = np.diff(paths.Y, axis=1)

    p = np.zeros(n)
    P = np.zeros(n)
    zero = _ZERO_REG
    p_tabs = [zero] * (steps + 1)
    q_tabs = [zero] * (steps + 1)
    P_tabs = [zero] * (steps + 1)
    Q_tabs = [zero] * (steps + 1)
    p_vals = np.zeros((n, steps + 1))
    q_vals = np.zeros((n, steps + 1))
    P_vals = np.zeros((n, steps + 1))
    Q_vals = np.zeros((n, steps + 1))

    for j in range(steps - 1, -1, -1):
        X, M, u = paths.X[:, j], paths.M[:, j], u_vals[:, j]
        F = basis.design({"x": X, "m": M, "u": u})
        theta = policy.evaluate(grid.times[j], {"x": X, "m": M})

        p_reg = fit_ridge(F, p, lam)
        p_cont = p_reg.predict(F)
        q_reg = fit_ridge(F, (p - p_cont) * dY[:, j] / dt, lam)
        q = q_reg.predict(F)
        hval = model.h.value(X)
        fval = model.f.value(X)
        p = p_cont + (hval * q + 0.5 * (fval - u) ** 2) * dt

        Pc_reg = fit_ridge(F, P, lam)
        P_cont = Pc_reg.predict(F)
        Q_reg = fit_ridge(F, (P - P_cont) * dW[:, j] / dt, lam)
        Q = Q_reg.predict(F)
        drv = _adjoint_driver(variant, model.b.deriv(X), model.sigma.deriv(X),
                              model.h.deriv(X), model.f.deriv(X), hval, fval,
                              u, M, theta, P_cont, Q, p, q)
        P = P_cont + drv * dt

        # refit the time-t values so the stored surfaces include the driver
        p_tabs[j] = fit_ridge(F, p, lam)
        q_tabs[j] = q_reg
        P_tabs[j] = fit_ridge(F, P, lam)
        Q_tabs[j] = Q_reg
        p_vals[:, j], q_vals[:, j] = p, q
        P_vals[:, j], Q_vals[:, j] = P, Q

    return AdjointSolution(p_tables=tuple(p_tabs), q_tables=tuple(q_tabs),
                           P_tables=tuple(P_tabs), Q_tables=tuple(Q_tabs),
                           grid=grid, basis=basis, variant=variant,
                           p_vals=p_vals, q_vals=q_vals, P_vals=P_vals,
                           Q_vals=Q_vals)


def solve_variational(model: ModelSpec, policy: DriftPolicy, v: DriftPolicy,
                      paths: PathBundle) -> VariationalPaths:
    """Forward Euler for the first-variation pair (X1, M1) of the state in
    the direction v, driven by the same W~ and Y increments as `paths`."""
    grid = paths.grid
    n, steps = paths.X.shape[0], grid.n_steps
    dW = paths.noise.dW
    dY = np.diff(paths.Y, axis=1)
    X1 = np.zeros((n, steps + 1))
    M1 = np.zeros((n, steps + 1))
    dt = grid.dt
    for j in range(steps):
        X, M = paths.X[:, j], paths.M[:, j]
        theta = policy.evaluate(grid.times[j], {"x": X, "m": M})
        vv = v.evaluate(grid.times[j], {"x": X, "m": M})
        bp, sp = model.b.deriv(X), model.sigma.deriv(X)
        sig = model.sigma.value(X)
        hv, hp = model.h.value(X), model.h.deriv(X)
        x1 = X1[:, j]
        m1 = M1[:, j]
        X1[:, j + 1] = x1 + ((bp + sp * theta) * x1 + sig * vv) * dt \
            + sp * x1 * dW[:, j]
        M1[:, j + 1] = m1 - hp * hv * M * x1 * dt \
            + (hv * m1 - hp * M * x1) * dY[:, j]
    return VariationalPaths(X1=X1, M1=M1)


def weighted_cost_qtilde(model: ModelSpec, policy: DriftPolicy, n_paths: int,
                         n_particles: int, seed: int, n_steps: int,
                         ess_threshold: float = 0.5
                         ) -> tuple[np.ndarray, PathBundle, np.ndarray]:
    """Per-path weighted mean-field cost under the reference measure:

        j_i = -(1/2) * sum_t (f(X_t) - u_t)^2 M_t dt

    where u is the nested-filter conditional-expectation ratio along the
    path's own observation. Returns (per-path values, bundle, u)."""
    grid = build_time_grid(model.T, n_steps)
    bundle = simulate_bundle(model, policy, grid, n_paths, seed, measure="Q_tilde")
    u = run_filter_bank(model, policy, np.diff(bundle.Y, axis=1), grid.dt,
                        n_particles, seed, salt=NESTED_FILTER_SALT,
                        ess_threshold=ess_threshold).u
    err = model.f.value(bundle.X[:, :-1]) - u[:, :-1]
    per_path = -0.5 * (err * err * bundle.M[:, :-1]).sum(axis=1) * grid.dt
    return per_path, bundle, u


def gateaux_fd(model: ModelSpec, policy: DriftPolicy, v: DriftPolicy,
               epsilons: Sequence[float], n_paths: int, n_particles: int,
               seed: int, n_steps: int = 50) -> GateauxEstimate:
    """Finite-difference derivative of the weighted mean-field cost in the
    direction v at the given policy, by central differences on a descending
    epsilon ladder with Richardson extrapolation and common random numbers.
    The caller keeps theta + eps*v inside the ambiguity radius; values at the
    clamp boundary measure the clamped perturbation instead."""
    eps = [float(e) for e in epsilons]
    if not eps or any(e <= 0 for e in eps) or any(a <= b for a, b in zip(eps, eps[1:])):
        raise InvalidArgumentError("epsilons must be a strictly decreasing positive ladder")
    slopes_pp = []
    for e in eps:
        plus = perturbed_policy(policy, v, +e, radius=model.k)
        minus = perturbed_policy(policy, v, -e, radius=model.k)
        jp, _, _ = weighted_cost_qtilde(model, plus, n_paths, n_particles, seed, n_steps)
        jm, _, _ = weighted_cost_qtilde(model, minus, n_paths, n_particles, seed, n_steps)
        slopes_pp.append((jp - jm) / (2.0 * e))
    slopes = [float(s.mean()) for s in slopes_pp]
    if len(eps) == 1:
        per_path = slopes_pp[0]
        rich_err = float("nan")
    else:
        e0, e1 = eps[-2], eps[-1]
        w = e0 * e0 / (e0 * e0 - e1 * e1)
        per_path = w * slopes_pp[-1] + (1.0 - w) * slopes_pp[-2]
        rich_err = abs(float(per_path.mean()) - slopes[-1])
    value = float(per_path.mean())
    se = float(per_path.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else float("nan")
    return GateauxEstimate(value=value, se=se, per_path=per_path,
                           slopes=tuple(slopes), richardson_error=rich_err)


def gateaux_adjoint(adjoint: AdjointSolution, paths: PathBundle,
                    model: ModelSpec, v: DriftPolicy) -> GateauxEstimate:
    """Adjoint representation of the same derivative: with zero terminal
    adjoints the duality identity gives

        dJ/deps = - E~[ integral sigma(X_t) P_t v_t dt ].
    """
    grid = paths.grid
    if adjoint.P_vals.shape != paths.X.shape:
        raise ShapeError("adjoint was solved on a different path set")
    n, steps = paths.X.shape[0], grid.n_steps
    acc = np.zeros(n)
    for j in range(steps):
        X, M = paths.X[:, j], paths.M[:, j]
        vv = v.evaluate(grid.times[j], {"x": X, "m": M})
        acc -= model.sigma.value(X) * adjoint.P_vals[:, j] * vv * grid.dt
    value = float(acc.mean())
    se = float(acc.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return GateauxEstimate(value=value, se=se, per_path=acc,
                           slopes=(value,), richardson_error=0.0)
