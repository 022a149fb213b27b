"""Saddle-point machinery: cost evaluation under any (control, measure) pair,
the control clamp, the fixed-point iteration on theta = k sgn(P), and
minimax-gap estimation over finite control/policy grids.

Control rules are causal functionals of the observation path. A filter rule
carries the drift policy its internal model assumes; evaluating it against a
different adversary policy is exactly the robustness experiment.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bsde import AdjointSolution, solve_adjoint, weighted_cost_qtilde
from .errors import InvalidArgumentError, ShapeError
from .features import RegressionBasis
from .filtering import run_filter_bank
from .model import ModelSpec, TimeGrid, build_time_grid, simulate_bundle
from .policies import DriftPolicy, mixture_policy, sign_of_regression_policy, zero_policy

# Which adjoint P-driver the fixed point uses by default. The duality test
# (gateaux_fd vs gateaux_adjoint) selects "derived": the printed main variant
# is dual to the printed variational system but does not reproduce the
# finite-difference derivative of the simulated cost. See the acceptance
# suite, which re-runs the adjudication and records the winner.
DEFAULT_ADJOINT_VARIANT = "derived"


def clamp_control(u_values: np.ndarray, f_sup: float) -> np.ndarray:
    """Clip the control into [-f_sup, f_sup]; never increases |f(X) - u|."""
    if f_sup < 0:
        raise InvalidArgumentError("f_sup must be >= 0")
    return np.clip(np.asarray(u_values, dtype=float), -f_sup, f_sup)


class ControlRule:
    """Causal control rule: observation paths -> control paths."""

    def evaluate(self, model: ModelSpec, grid: TimeGrid, Y: np.ndarray,
                 n_particles: Optional[int] = None,
                 seed: int = 0) -> np.ndarray:
        raise NotImplementedError

    def digest(self) -> str:
        raise NotImplementedError


class ConstantRule(ControlRule):
    def __init__(self, value: float):
        self.value = float(value)

    def evaluate(self, model, grid, Y, n_particles=None, seed=0):
        return np.full_like(np.atleast_2d(Y), self.value)

    def digest(self) -> str:
        return f"const({self.value!r})"


class FilterRule(ControlRule):
    """The particle-filter estimate of f(X_t) under an assumed drift policy."""

    def __init__(self, policy: DriftPolicy, n_particles: Optional[int] = None,
                 ess_threshold: float = 0.5, seed: Optional[int] = None,
                 salt: int = 0):
        self.policy = policy
        self.n_particles = n_particles
        self.ess_threshold = ess_threshold
        self.seed = seed
        self.salt = salt

    def evaluate(self, model, grid, Y, n_particles=None, seed=0):
        n_part = self.n_particles or n_particles
        if n_part is None:
            raise InvalidArgumentError("filter rule needs a particle count")
        Y = np.atleast_2d(Y)
        return run_filter_bank(
            model, self.policy, np.diff(Y, axis=1), grid.dt, n_part,
            self.seed if self.seed is not None else seed,
            salt=self.salt, ess_threshold=self.ess_threshold).u

    def digest(self) -> str:
        return f"filter({self.policy.digest()},n={self.n_particles},salt={self.salt})"


class ShiftedRule(ControlRule):
    """A base rule shifted by a constant and clamped to the target bound."""

    def __init__(self, base: ControlRule, delta: float, f_sup: float):
        self.base = base
        self.delta = float(delta)
        self.f_sup = float(f_sup)

    def evaluate(self, model, grid, Y, n_particles=None, seed=0):
        u = self.base.evaluate(model, grid, Y, n_particles=n_particles, seed=seed)
        return clamp_control(u + self.delta, self.f_sup)

    def digest(self) -> str:
        return f"shift({self.base.digest()},{self.delta!r})"


@dataclass(frozen=True)
class CostReport:
    J: float
    se: float
    n_paths: int
    measure_tag: str
    policy_digest: str
    per_path: np.ndarray = field(repr=False)


def evaluate_cost(model: ModelSpec, u_rule: ControlRule, theta: DriftPolicy,
                  n_paths: int, n_particles: int, seed: int,
                  n_steps: int = 50, grid: Optional[TimeGrid] = None) -> CostReport:
    """J(u, Q_theta) = E under the theta-perturbed measure of the integrated
    squared error, by direct simulation. Deterministic given the seed."""
    if theta.radius > model.k + 1e-12:
        raise InvalidArgumentError("adversary policy exceeds the ambiguity radius")
    grid = grid or build_time_grid(model.T, n_steps)
    bundle = simulate_bundle(model, theta, grid, n_paths, seed, measure="Q")
    u = u_rule.evaluate(model, grid, bundle.Y, n_particles=n_particles, seed=seed)
    if u.shape != bundle.X.shape:
        raise ShapeError("control rule returned misaligned paths")
    err = model.f.value(bundle.X[:, :-1]) - u[:, :-1]
    per_path = (err * err).sum(axis=1) * grid.dt
    J = float(per_path.mean())
    se = float(per_path.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else float("nan")
    return CostReport(J=J, se=se, n_paths=n_paths, measure_tag="Q",
                      policy_digest=theta.digest(), per_path=per_path)


def sign_policy(adjoint: AdjointSolution, k: float) -> DriftPolicy:
    """theta = k * sgn(P_hat) from the regressed adjoint surface, with
    sgn(0) = 0 so the value set is exactly {-k, 0, +k}."""
    if k < 0:
        raise InvalidArgumentError("k must be >= 0")
    if k == 0.0:
        return zero_policy()
    return sign_of_regression_policy(adjoint.P_tables, adjoint.basis, k,
                                     adjoint.grid.dt)


@dataclass(frozen=True)
class PicardConfig:
    n_paths: int = 2000
    n_particles: int = 500
    n_steps: int = 50
    seed: int = 0
    max_iters: int = 20
    damping: float = 0.5
    tol: float = 0.02            # sign-agreement tolerance
    rel_j_tol: float = 0.01
    ess_threshold: float = 0.5
    adjoint_variant: str = DEFAULT_ADJOINT_VARIANT
    adjoint_basis: Optional[RegressionBasis] = None
    mixture_prune: float = 0.02

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise InvalidArgumentError("damping must be in (0, 1]")
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be >= 1")


@dataclass(frozen=True)
class PicardIteration:
    index: int
    J: float
    sign_agreement: float
    damping: float


@dataclass(frozen=True)
class PicardReport:
    iterations: tuple[PicardIteration, ...]
    converged: bool
    final_policy: DriftPolicy
    final_rule: ControlRule
    final_u_digest: str
    final_cost: CostReport


def _sign_field(policy: DriftPolicy, bundle, times: np.ndarray) -> np.ndarray:
    out = np.empty_like(bundle.X)
    for j, t in enumerate(times):
        vals = policy.evaluate(t, {"x": bundle.X[:, j], "m": bundle.M[:, j]})
        out[:, j] = np.sign(vals)
    return out


def picard_solve(model: ModelSpec, config: PicardConfig) -> PicardReport:
    """Alternate simulate -> filter -> adjoint -> sign update until the sign
    field of theta stabilizes.

    Convergence is declared when the sign-agreement fraction stays above
    1 - tol on two consecutive iterations and the cost moves by less than
    rel_j_tol relatively. Non-convergence is reported, not raised. The
    damping factor halves whenever the agreement drops between iterations.
    """
    k = model.k
    grid = build_time_grid(model.T, config.n_steps)

    def make_rule(policy: DriftPolicy) -> FilterRule:
        return FilterRule(policy, n_particles=config.n_particles,
                          ess_threshold=config.ess_threshold,
                          seed=config.seed, salt=0)

    if k == 0.0:
        pol = zero_policy()
        rule = make_rule(pol)
        cost = evaluate_cost(model, rule, pol, config.n_paths,
                             config.n_particles, config.seed,
                             grid=grid)
        return PicardReport(
            iterations=(PicardIteration(1, cost.J, 1.0, config.damping),),
            converged=True, final_policy=pol, final_rule=rule,
            final_u_digest=rule.digest(), final_cost=cost)

    theta = zero_policy()
    prev_target = zero_policy()
    gamma = config.damping
    iters: list[PicardIteration] = []
    converged = False
    prev_agree = -1.0
    prev_j = None

    for it in range(1, config.max_iters + 1):
        per_path, bundle, u = weighted_cost_qtilde(
            model, theta, config.n_paths, config.n_particles, config.seed,
            config.n_steps, ess_threshold=config.ess_threshold)
        J_it = float(-2.0 * per_path.mean())
        adjoint = solve_adjoint(bundle, u, model, theta,
                                basis=config.adjoint_basis,
                                variant=config.adjoint_variant)
        target = sign_policy(adjoint, k)

        s_new = _sign_field(target, bundle, grid.times)
        s_prev = _sign_field(prev_target, bundle, grid.times)
        agree = float((s_new == s_prev).mean())
        if prev_agree >= 0.0 and agree < prev_agree:
            gamma = max(gamma * 0.5, 1e-3)
        iters.append(PicardIteration(it, J_it, agree, gamma))

        j_settled = prev_j is not None and \
            abs(J_it - prev_j) <= config.rel_j_tol * max(abs(prev_j), 1e-12)
        if agree >= 1.0 - config.tol and prev_agree >= 1.0 - config.tol and j_settled:
            converged = True
            break

        theta = mixture_policy([(1.0 - gamma, theta), (gamma, target)],
                               radius=k, prune_below=config.mixture_prune)
        prev_target = target
        prev_agree = agree
        prev_j = J_it

    rule = make_rule(theta)
    cost = evaluate_cost(model, rule, theta, config.n_paths,
                         config.n_particles, config.seed, grid=grid)
    return PicardReport(iterations=tuple(iters), converged=converged,
                        final_policy=theta, final_rule=rule,
                        final_u_digest=rule.digest(), final_cost=cost)


@dataclass(frozen=True)
class MinimaxReport:
    J: np.ndarray                # (n_controls, n_policies)
    se: np.ndarray
    min_sup: float
    sup_min: float
    gap: float
    argmin_control: int
    argmax_policy: int


def minimax_gap(model: ModelSpec, control_grid: Sequence[ControlRule],
                theta_grid: Sequence[DriftPolicy], n_paths: int,
                n_particles: int, seed: int, n_steps: int = 50) -> MinimaxReport:
    """min over controls of the max over policies, and the reverse, on one
    common-random-number cost matrix. On any single matrix
    min-of-row-maxima >= max-of-column-minima holds exactly."""
    if not control_grid or not theta_grid:
        raise InvalidArgumentError("both grids must be nonempty")
    grid = build_time_grid(model.T, n_steps)
    J = np.empty((len(control_grid), len(theta_grid)))
    se = np.empty_like(J)
    for i, rule in enumerate(control_grid):
        for j, pol in enumerate(theta_grid):
            rep = evaluate_cost(model, rule, pol, n_paths, n_particles, seed,
                                grid=grid)
            J[i, j], se[i, j] = rep.J, rep.se
    row_sup = J.max(axis=1)
    col_min = J.min(axis=0)
    i_star = int(np.argmin(row_sup))
    j_star = int(np.argmax(col_min))
    min_sup = float(row_sup[i_star])
    sup_min = float(col_min[j_star])
    return MinimaxReport(J=J, se=se, min_sup=min_sup, sup_min=sup_min,
                         gap=min_sup - sup_min, argmin_control=i_star,
                         argmax_policy=j_star)


def probe_digest(rule: ControlRule, policy: DriftPolicy) -> str:
    raw = f"{rule.digest()}|{policy.digest()}".encode()
    return hashlib.sha256(raw).hexdigest()[:12]


@dataclass(frozen=True)
class SaddleProbe:
    kind: str                    # "saddle", "policy_probe" or "control_shift"
    probe_id: str
    report: CostReport


def random_probe_policies(k: float, horizon: float, n_probes: int,
                          seed: int, n_buckets: int = 4) -> list[DriftPolicy]:
    """Random admissible piecewise-constant-in-time policies in [-k, k]."""
    from .model import substream  # local import to avoid a cycle at module load
    from .policies import time_table_policy

    gen = substream(seed, role=9, index=0)
    return [time_table_policy(gen.uniform(-k, k, size=n_buckets), horizon, radius=k)
            for _ in range(n_probes)]


def saddle_probes(model: ModelSpec, report: PicardReport, n_policy_probes: int,
                  deltas: Sequence[float], n_paths: int, n_particles: int,
                  seed: int, n_steps: int = 50) -> list[SaddleProbe]:
    """Cost probes around the computed pair (u*, theta*): random admissible
    adversaries against u*, and clamped constant shifts of u* against
    theta*. Common random numbers throughout, so paired differences against
    the saddle cost are meaningful."""
    grid = build_time_grid(model.T, n_steps)
    out = [SaddleProbe("saddle", "ustar_thetastar",
                       evaluate_cost(model, report.final_rule, report.final_policy,
                                     n_paths, n_particles, seed, grid=grid))]
    for i, pol in enumerate(random_probe_policies(model.k, model.T,
                                                  n_policy_probes, seed)):
        out.append(SaddleProbe("policy_probe", f"theta_{i}",
                               evaluate_cost(model, report.final_rule, pol,
                                             n_paths, n_particles, seed, grid=grid)))
    for d in deltas:
        shifted = ShiftedRule(report.final_rule, d, model.f_sup)
        out.append(SaddleProbe("control_shift", f"delta_{d:+g}",
                               evaluate_cost(model, shifted, report.final_policy,
                                             n_paths, n_particles, seed, grid=grid)))
    return out
