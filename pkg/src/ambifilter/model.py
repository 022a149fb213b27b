"""Filtering model with drift ambiguity and the forward Monte Carlo kernel.

The model is

    dX = b(X) dt + sigma(X) dW        X_0 = x0
    dY = h(X) dt + dB                 Y_0 = 0

under the base measure P, with an ambiguity class of measures obtained by
Girsanov drift perturbations |theta| <= k on the W channel. Three simulation
measures are supported:

    P        signal drift b; Y carries the sensor drift; log-density of the
             theta-measure accumulated along the path
    Q        signal drift b + sigma*theta (the perturbed world); Y carries
             the sensor drift
    Q_tilde  reference measure: signal drift b + sigma*theta, but Y is a free
             Brownian motion decoupled from the signal (the backbone for the
             unnormalized filter and the adjoint solver)

The exponential weight M translating between Q and Q_tilde uses the exact
one-step solution exp(h dY - h^2 dt / 2), which keeps M strictly positive
where a naive Euler step would not.

Randomness is counter-based: every path's increments come from a dedicated
Philox substream keyed by (seed, role, path_id), so a path is reproducible
from its key alone and parallel schedules cannot reorder draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidArgumentError, ShapeError
from .policies import DriftPolicy
from .presets import CoefPreset, TestFunction

ROLE_W = 0
ROLE_B = 1
ROLE_CLOUD_NORMAL = 2
ROLE_CLOUD_UNIFORM = 3
ROLE_MARKOV = 4

MEASURES = ("P", "Q", "Q_tilde")

_SIGMA_CHECK_GRID = np.linspace(-12.0, 12.0, 201)


def substream(seed: int, role: int, index: int = 0,
              extra: int = 0) -> np.random.Generator:
    """Philox generator for the (seed, role, index[, extra]) substream."""
    idx = int(index)
    key = (int(role), idx & 0xFFFFFFFF, (idx >> 32) & 0xFFFFFFFF, int(extra))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int
    dt: float
    times: np.ndarray

    @property
    def horizon(self) -> float:
        return float(self.times[-1])


def build_time_grid(T: float, n_steps: int) -> TimeGrid:
    if not T > 0:
        raise InvalidArgumentError(f"horizon T must be > 0, got {T}")
    if n_steps < 1:
        raise InvalidArgumentError(f"n_steps must be >= 1, got {n_steps}")
    dt = T / n_steps
    times = np.linspace(0.0, T, n_steps + 1)
    return TimeGrid(n_steps=int(n_steps), dt=dt, times=times)


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients, initial state, horizon and ambiguity radius."""

    b: CoefPreset
    sigma: CoefPreset
    h: CoefPreset
    f: CoefPreset
    x0: float
    T: float
    k: float

    def __post_init__(self):
        if not self.T > 0:
            raise InvalidArgumentError("horizon T must be > 0")
        if self.k < 0:
            raise InvalidArgumentError("ambiguity radius k must be >= 0")
        sig = self.sigma.value(_SIGMA_CHECK_GRID)
        if np.any(np.asarray(sig) < 0):
            raise InvalidArgumentError("sigma(x) must be >= 0 at all sampled points")

    @property
    def h1_compliant(self) -> bool:
        """Bounded f, h with uniformly bounded derivatives everywhere."""
        return (self.f.bounded and self.h.bounded
                and all(c.bounded_deriv for c in (self.b, self.sigma, self.f, self.h)))

    @property
    def oracle_only(self) -> bool:
        return not self.h1_compliant

    @property
    def f_sup(self) -> float:
        return self.f.sup


@dataclass(frozen=True)
class NoiseBundle:
    dW: np.ndarray            # (n_paths, n_steps), variance dt per step
    dB: np.ndarray
    seed: int
    path_ids: np.ndarray
    dt: float

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dW.shape[1]


def sample_noise(grid: TimeGrid, n_paths: int, seed: int,
                 path_ids: Optional[np.ndarray] = None) -> NoiseBundle:
    """Independent Gaussian increments for the W and B channels, one Philox
    substream per (seed, role, path_id)."""
    if n_paths < 1:
        raise InvalidArgumentError("n_paths must be >= 1")
    if path_ids is None:
        path_ids = np.arange(n_paths, dtype=np.int64)
    else:
        path_ids = np.asarray(path_ids, dtype=np.int64)
        if path_ids.shape != (n_paths,):
            raise ShapeError("path_ids must have shape (n_paths,)")
    root = np.sqrt(grid.dt)
    dW = np.empty((n_paths, grid.n_steps))
    dB = np.empty((n_paths, grid.n_steps))
    for i, pid in enumerate(path_ids):
        dW[i] = substream(seed, ROLE_W, pid).standard_normal(grid.n_steps) * root
        dB[i] = substream(seed, ROLE_B, pid).standard_normal(grid.n_steps) * root
    return NoiseBundle(dW=dW, dB=dB, seed=int(seed), path_ids=path_ids, dt=grid.dt)


@dataclass(frozen=True)
class PathBundle:
    grid: TimeGrid
    X: np.ndarray             # (n_paths, n_steps + 1)
    Y: np.ndarray
    M: np.ndarray
    log_density: np.ndarray   # log Lambda_t, Lambda = dQ/dP restricted to F_t
    measure_tag: str
    noise: NoiseBundle = field(repr=False)

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]


def _policy_values(policy: DriftPolicy, t: float, x: np.ndarray,
                   m: Optional[np.ndarray]) -> np.ndarray:
    feats = {"x": x}
    if m is not None:
        feats["m"] = m
    return policy.evaluate(t, feats)


def _check_policy_radius(model: ModelSpec, policy: DriftPolicy) -> None:
    if policy.radius > model.k + 1e-12:
        raise InvalidArgumentError(
            f"policy radius {policy.radius} exceeds model ambiguity radius {model.k}"
        )


def evolve_signal(model: ModelSpec, policy: DriftPolicy, noise: NoiseBundle,
                  grid: TimeGrid, m_paths: Optional[np.ndarray] = None) -> np.ndarray:
    """Euler paths of dX = (b + sigma*theta) dt + sigma dW~, coefficients and
    theta at the left endpoint. Policies that need the weight feature must be
    given m_paths (or use simulate_bundle, which co-evolves it)."""
    _check_policy_radius(model, policy)
    if noise.n_steps != grid.n_steps:
        raise ShapeError("noise and grid disagree on n_steps")
    n = noise.n_paths
    X = np.empty((n, grid.n_steps + 1))
    X[:, 0] = model.x0
    for j in range(grid.n_steps):
        xj = X[:, j]
        mj = None if m_paths is None else m_paths[:, j]
        theta = _policy_values(policy, grid.times[j], xj, mj)
        sig = model.sigma.value(xj)
        X[:, j + 1] = xj + (model.b.value(xj) + sig * theta) * grid.dt + sig * noise.dW[:, j]
    return X


def evolve_observation(model: ModelSpec, X: np.ndarray, noise: NoiseBundle,
                       measure_tag: str = "P") -> np.ndarray:
    """Observation paths. Under P or Q the sensor drift h(X) enters; under
    Q_tilde the observation is the free Brownian motion itself."""
    if measure_tag not in MEASURES:
        raise InvalidArgumentError(f"measure_tag must be one of {MEASURES}")
    if X.shape[0] != noise.n_paths:
        raise ShapeError("X and noise disagree on n_paths")
    if X.shape[1] != noise.n_steps + 1:
        raise ShapeError("X and noise disagree on n_steps")
    n, n_steps = noise.n_paths, noise.n_steps
    Y = np.empty((n, n_steps + 1))
    Y[:, 0] = 0.0
    if measure_tag == "Q_tilde":
        np.cumsum(noise.dB, axis=1, out=Y[:, 1:])
        return Y
    for j in range(n_steps):
        Y[:, j + 1] = Y[:, j] + model.h.value(X[:, j]) * noise.dt + noise.dB[:, j]
    return Y


def evolve_weight(model: ModelSpec, X: np.ndarray, Y: np.ndarray,
                  grid: TimeGrid) -> np.ndarray:
    """Exponential weight M with the exact one-step solution
    M_{t+dt} = M_t * exp(h(X_t) dY - h(X_t)^2 dt / 2)."""
    if X.shape != Y.shape:
        raise ShapeError("X and Y must have identical shapes")
    logM = np.zeros_like(X)
    for j in range(grid.n_steps):
        hj = model.h.value(X[:, j])
        dY = Y[:, j + 1] - Y[:, j]
        logM[:, j + 1] = logM[:, j] + hj * dY - 0.5 * hj * hj * grid.dt
    return np.exp(logM)


def girsanov_log_density(policy: DriftPolicy, X: np.ndarray, dW: np.ndarray,
                         grid: TimeGrid,
                         m_paths: Optional[np.ndarray] = None) -> np.ndarray:
    """log Lambda_t = sum theta dW - theta^2 dt / 2 along paths, with theta
    evaluated at the left endpoint; dW are the base-measure increments."""
    if X.shape[0] != dW.shape[0] or X.shape[1] != dW.shape[1] + 1:
        raise ShapeError("X and dW are not aligned")
    logL = np.zeros_like(X)
    for j in range(grid.n_steps):
        mj = None if m_paths is None else m_paths[:, j]
        theta = _policy_values(policy, grid.times[j], X[:, j], mj)
        logL[:, j + 1] = logL[:, j] + theta * dW[:, j] - 0.5 * theta * theta * grid.dt
    return logL


def apply_generator(model: ModelSpec, theta: float, test_fn: TestFunction,
                    x: float) -> float:
    """Generator of the perturbed signal:
    L phi = phi' * (b + sigma*theta) + phi'' * sigma^2 / 2."""
    sig = float(model.sigma.value(x))
    drift = float(model.b.value(x)) + sig * theta
    return test_fn.d1(x) * drift + 0.5 * test_fn.d2(x) * sig * sig


def simulate_bundle(model: ModelSpec, policy: DriftPolicy, grid: TimeGrid,
                    n_paths: int, seed: int, measure: str = "Q_tilde",
                    noise: Optional[NoiseBundle] = None) -> PathBundle:
    """Co-evolve (X, Y, M, log-density) in one pass under the chosen measure.

    This is the forward backbone for every solver: the policy may read the
    weight feature M, so signal and weight advance together. Under Q_tilde
    the decoupling is exploited: Y is generated directly from the B-channel
    noise and M is driven by it.
    """
    if measure not in MEASURES:
        raise InvalidArgumentError(f"measure must be one of {MEASURES}")
    _check_policy_radius(model, policy)
    if noise is None:
        noise = sample_noise(grid, n_paths, seed)
    elif noise.n_paths != n_paths or noise.n_steps != grid.n_steps:
        raise ShapeError("supplied noise does not match (n_paths, grid)")
    n = n_paths
    dt = grid.dt
    X = np.empty((n, grid.n_steps + 1))
    Y = np.empty_like(X)
    logM = np.zeros_like(X)
    logL = np.zeros_like(X)
    X[:, 0] = model.x0
    Y[:, 0] = 0.0
    perturbed = measure in ("Q", "Q_tilde")
    for j in range(grid.n_steps):
        xj = X[:, j]
        mj = np.exp(logM[:, j]) if "m" in policy.requires else None
        theta = _policy_values(policy, grid.times[j], xj, mj)
        sig = model.sigma.value(xj)
        hj = model.h.value(xj)
        drift = model.b.value(xj) + (sig * theta if perturbed else 0.0)
        X[:, j + 1] = xj + drift * dt + sig * noise.dW[:, j]
        if measure == "Q_tilde":
            dY = noise.dB[:, j]
        else:
            dY = hj * dt + noise.dB[:, j]
        Y[:, j + 1] = Y[:, j] + dY
        logM[:, j + 1] = logM[:, j] + hj * dY - 0.5 * hj * hj * dt
        if perturbed:
            # dW = dW~ + theta dt, so log Lambda gains theta dW~ + theta^2 dt / 2
            logL[:, j + 1] = logL[:, j] + theta * noise.dW[:, j] + 0.5 * theta * theta * dt
        else:
            logL[:, j + 1] = logL[:, j] + theta * noise.dW[:, j] - 0.5 * theta * theta * dt
    return PathBundle(grid=grid, X=X, Y=Y, M=np.exp(logM), log_density=logL,
                      measure_tag=measure, noise=noise)
