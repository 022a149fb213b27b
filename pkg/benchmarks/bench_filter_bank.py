"""Throughput benchmark for the particle-filter bank, the package's hot loop.

Prints particle-steps per second for a few (n_paths, n_particles) shapes on
the bounded tanh model; use it to size Monte Carlo runs against a time
budget.
"""

import time

import numpy as np

from ambifilter.filtering import run_filter_bank
from ambifilter.model import ModelSpec, build_time_grid, simulate_bundle
from ambifilter.policies import constant_policy, zero_policy
from ambifilter.presets import make_coef

MODEL = ModelSpec(b=make_coef("tanh", 0.2), sigma=make_coef("constant", 0.5),
                  h=make_coef("tanh", 1.0), f=make_coef("tanh", 1.0),
                  x0=0.8, T=1.0, k=0.25)

SHAPES = [(100, 2000, 100), (500, 200, 50), (2000, 250, 50), (2000, 500, 50)]


def bench(n_paths: int, n_particles: int, n_steps: int, repeats: int = 3) -> float:
    grid = build_time_grid(MODEL.T, n_steps)
    bundle = simulate_bundle(MODEL, zero_policy(), grid, n_paths, 1,
                             measure="Q_tilde")
    dY = np.diff(bundle.Y, axis=1)
    pol = constant_policy(0.1, radius=MODEL.k)
    run_filter_bank(MODEL, pol, dY, grid.dt, n_particles, 1)  # warm-up
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        run_filter_bank(MODEL, pol, dY, grid.dt, n_particles, 1)
        best = min(best, time.perf_counter() - t0)
    return n_paths * n_particles * n_steps / best


def main() -> None:
    print(f"{'paths':>7} {'particles':>9} {'steps':>6} {'Mp-steps/s':>11}")
    for n_paths, n_particles, n_steps in SHAPES:
        rate = bench(n_paths, n_particles, n_steps)
        print(f"{n_paths:7d} {n_particles:9d} {n_steps:6d} {rate/1e6:11.1f}")


if __name__ == "__main__":
    main()
