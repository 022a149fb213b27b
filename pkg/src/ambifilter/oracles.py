"""Independent references for the test suite and acceptance criteria.

Nothing here shares code with the estimators it checks: the Kalman-Bucy
filter integrates its own Riccati equation, the finite-state filter is an
exact matrix recursion, and the brute-force worst case is an exhaustive
maximum of direct cost evaluations over a finite policy family.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import InvalidArgumentError, ShapeError
from .filtering import FilterEstimatePath, run_filter_finite
from .minimax import ControlRule, CostReport, evaluate_cost
from .model import ModelSpec, TimeGrid, ROLE_MARKOV, substream
from .policies import DriftPolicy, time_table_policy, zero_policy


@dataclass(frozen=True)
class LinearGaussianSpec:
    """dX = a X dt + sigma dW, dY = c X dt + dB. Validation only; the linear
    sensor and identity target violate the boundedness the solvers assume."""

    a: float
    sigma: float
    c: float
    x0: float
    T: float

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidArgumentError("sigma must be >= 0")
        if not self.T > 0:
            raise InvalidArgumentError("T must be > 0")


def _riccati_rhs(spec: LinearGaussianSpec, R: float) -> float:
    return 2.0 * spec.a * R + spec.sigma**2 - spec.c**2 * R * R


def riccati_path(spec: LinearGaussianSpec, grid: TimeGrid,
                 R0: float = 0.0) -> np.ndarray:
    """Classic RK4 on dR/dt = 2aR + sigma^2 - c^2 R^2."""
    R = np.empty(grid.n_steps + 1)
    R[0] = R0
    dt = grid.dt
    for j in range(grid.n_steps):
        r = R[j]
        k1 = _riccati_rhs(spec, r)
        k2 = _riccati_rhs(spec, r + 0.5 * dt * k1)
        k3 = _riccati_rhs(spec, r + 0.5 * dt * k2)
        k4 = _riccati_rhs(spec, r + dt * k3)
        R[j + 1] = r + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return R


def kalman_bucy(spec: LinearGaussianSpec, Y: np.ndarray, grid: TimeGrid,
                R0: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Conditional mean and variance paths for one (or a bank of) observation
    paths. The mean uses an exponential one-step integrator with the
    mid-step Riccati gain, exact for frozen coefficients within a step."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != grid.n_steps + 1:
        raise ShapeError("Y and grid are not aligned")
    R = riccati_path(spec, grid, R0)
    mean = np.empty_like(Y)
    mean[:, 0] = spec.x0
    dt = grid.dt
    for j in range(grid.n_steps):
        Rm = 0.5 * (R[j] + R[j + 1])
        lam = spec.a - spec.c**2 * Rm
        growth = np.exp(lam * dt)
        gain = spec.c * Rm * (growth - 1.0) / (lam * dt) if lam * dt != 0.0 else spec.c * Rm
        mean[:, j + 1] = growth * mean[:, j] + gain * (Y[:, j + 1] - Y[:, j])
    if mean.shape[0] == 1:
        return mean[0], R
    return mean, R


class KalmanControlRule(ControlRule):
    """Causal control rule given by the Kalman-Bucy conditional mean."""

    def __init__(self, spec: LinearGaussianSpec):
        self.spec = spec

    def evaluate(self, model: ModelSpec, grid: TimeGrid, Y: np.ndarray,
                 n_particles=None, seed: int = 0) -> np.ndarray:
        mean, _ = kalman_bucy(self.spec, Y, grid)
        return np.atleast_2d(mean)

    def digest(self) -> str:
        return f"kalman({self.spec.a!r},{self.spec.sigma!r},{self.spec.c!r})"


@dataclass(frozen=True)
class FiniteSignalSpec:
    """Continuous-time chain surrogate: states, generator (rows sum to zero,
    off-diagonal nonnegative) and tabulated sensor/target values."""

    states: np.ndarray
    rate_matrix: np.ndarray
    h_values: np.ndarray
    f_values: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.rate_matrix, dtype=float)
        m = len(self.states)
        if Q.shape != (m, m):
            raise ShapeError("rate matrix must be square over the states")
        off = Q - np.diag(np.diag(Q))
        if np.any(off < -1e-12):
            raise InvalidArgumentError("off-diagonal rates must be >= 0")
        if np.max(np.abs(Q.sum(axis=1))) > 1e-9:
            raise InvalidArgumentError("rate matrix rows must sum to 0")

    @property
    def n_states(self) -> int:
        return len(self.states)


def make_finite_surrogate(model: ModelSpec, n_states: int, x_lo: float,
                          x_hi: float, theta: float = 0.0) -> FiniteSignalSpec:
    """Central finite differences of the generator on a uniform state grid
    with reflecting boundaries; falls back to upwind differencing for the
    drift wherever central rates would go negative."""
    if n_states < 2:
        raise InvalidArgumentError("need at least two states")
    xs = np.linspace(x_lo, x_hi, n_states)
    dx = xs[1] - xs[0]
    Q = np.zeros((n_states, n_states))
    adv = model.b.value(xs) + model.sigma.value(xs) * theta
    dif = 0.5 * np.asarray(model.sigma.value(xs)) ** 2
    for i in range(n_states):
        right = dif[i] / dx**2 + adv[i] / (2 * dx)
        left = dif[i] / dx**2 - adv[i] / (2 * dx)
        if right < 0 or left < 0:
            right = dif[i] / dx**2 + max(adv[i], 0.0) / dx
            left = dif[i] / dx**2 + max(-adv[i], 0.0) / dx
        if i + 1 < n_states:
            Q[i, i + 1] = right
        if i - 1 >= 0:
            Q[i, i - 1] = left
        Q[i, i] = -Q[i].sum()
    return FiniteSignalSpec(states=xs, rate_matrix=Q,
                            h_values=np.asarray(model.h.value(xs), dtype=float),
                            f_values=np.asarray(model.f.value(xs), dtype=float))


def finite_signal_filter(spec: FiniteSignalSpec, Y: np.ndarray, grid: TimeGrid,
                         x0: float) -> np.ndarray:
    """Exact unnormalized mass recursion: propagate the mass vector by the
    transpose transition semigroup, then reweight each state by the
    exponential observation factor. Returns (n_steps + 1, n_states)."""
    Y = np.asarray(Y, dtype=float)
    if Y.size != grid.n_steps + 1:
        raise ShapeError("Y and grid are not aligned")
    trans = expm(spec.rate_matrix * grid.dt)
    masses = np.zeros((grid.n_steps + 1, spec.n_states))
    masses[0, int(np.argmin(np.abs(spec.states - x0)))] = 1.0
    for j in range(grid.n_steps):
        dY = Y[j + 1] - Y[j]
        weights = np.exp(spec.h_values * dY - 0.5 * spec.h_values**2 * grid.dt)
        masses[j + 1] = weights * (trans.T @ masses[j])
    return masses


def finite_signal_estimates(spec: FiniteSignalSpec, masses: np.ndarray) -> np.ndarray:
    """u_t = sum f_j rho_j / sum rho_j from the mass recursion."""
    return masses @ spec.f_values / masses.sum(axis=1)


def simulate_finite_signal(spec: FiniteSignalSpec, grid: TimeGrid, seed: int,
                           x0: float, salt: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """One chain trajectory (state indices) and a consistent observation path
    dY = h(X) dt + dB."""
    trans_cum = np.cumsum(expm(spec.rate_matrix * grid.dt), axis=1)
    gen = substream(seed, ROLE_MARKOV, salt, extra=1)
    idx = np.empty(grid.n_steps + 1, dtype=np.intp)
    idx[0] = int(np.argmin(np.abs(spec.states - x0)))
    Y = np.empty(grid.n_steps + 1)
    Y[0] = 0.0
    root = np.sqrt(grid.dt)
    for j in range(grid.n_steps):
        Y[j + 1] = Y[j] + spec.h_values[idx[j]] * grid.dt + root * gen.standard_normal()
        u = gen.random()
        idx[j + 1] = min(int((trans_cum[idx[j]] <= u).sum()), spec.n_states - 1)
    return idx, Y


def particle_filter_on_surrogate(spec: FiniteSignalSpec, Y: np.ndarray,
                                 grid: TimeGrid, n_particles: int, seed: int,
                                 x0: float,
                                 ess_threshold: float = 0.5) -> FilterEstimatePath:
    """The package's particle machinery run on the chain itself, so that it
    converges to the exact recursion as the particle count grows."""
    trans = expm(spec.rate_matrix * grid.dt)
    return run_filter_finite(spec.states, trans, spec.h_values, spec.f_values,
                             Y, grid, n_particles, seed, x0,
                             ess_threshold=ess_threshold)


@dataclass(frozen=True)
class GridSupReport:
    J_worst: float
    argmax_policy: DriftPolicy
    reports: tuple[CostReport, ...]

    @property
    def se_worst(self) -> float:
        i = int(np.argmax([r.J for r in self.reports]))
        return self.reports[i].se


def sign_pattern_family(k: float, n_buckets: int, horizon: float,
                        levels: Sequence[float] = (-1.0, 0.0, 1.0)) -> list[DriftPolicy]:
    """All piecewise-constant-in-time policies over n_buckets equal buckets
    with values k * levels; the worst-case drift is bang-bang, so sign
    patterns are the natural brute-force family."""
    if k == 0.0:
        return [zero_policy()]
    vals = [k * lv for lv in levels]
    fams: list[DriftPolicy] = []
    idx = np.indices([len(vals)] * n_buckets).reshape(n_buckets, -1).T
    for pattern in idx:
        fams.append(time_table_policy([vals[i] for i in pattern], horizon, radius=k))
    return fams


def grid_sup_cost(model: ModelSpec, u_rule: ControlRule,
                  theta_family: Sequence[DriftPolicy], n_paths: int, seed: int,
                  n_steps: int = 50, n_particles: int = 300,
                  grid: Optional[TimeGrid] = None) -> GridSupReport:
    """Exhaustive worst case over a finite policy family with common random
    numbers: every member is costed on the same underlying noise."""
    if not theta_family:
        raise InvalidArgumentError("theta_family must be nonempty")
    reports = []
    for pol in theta_family:
        reports.append(evaluate_cost(model, u_rule, pol, n_paths, n_particles,
                                     seed, n_steps=n_steps, grid=grid))
    js = [r.J for r in reports]
    best = int(np.argmax(js))
    return GridSupReport(J_worst=float(js[best]), argmax_policy=theta_family[best],
                         reports=tuple(reports))
