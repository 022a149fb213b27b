"""Named coefficient presets for the model functions b, sigma, h, f.

Coefficients live in config files, so they are a registry of named forms with
numeric parameters rather than arbitrary callables:

    constant(c)         -> c
    linear(c0, c1)      -> c0 + c1*x
    tanh(a, b, c, d)    -> a*tanh(b*x + c) + d      (trailing params optional)
    sine(a, b, c, d)    -> a*sin(b*x + c) + d
    identity()          -> x   (alias of linear(0, 1))

Each preset knows its derivative, a sup-norm bound, and whether it satisfies
the boundedness requirements needed by the solver modules. Unbounded presets
(linear sensor, identity target) are permitted only for validation against
closed-form references.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

# kernel codes, shared with _kernels implementations
CODE_CONSTANT = 0
CODE_LINEAR = 1
CODE_TANH = 2
CODE_SINE = 3

_N_KERNEL_PARAMS = 4


@dataclass(frozen=True)
class CoefPreset:
    """A named scalar function of x with numeric parameters."""

    name: str
    params: tuple[float, ...]
    code: int = field(repr=False)

    def value(self, x):
        p = self.params
        if self.code == CODE_CONSTANT:
            return np.full_like(np.asarray(x, dtype=float), p[0]) if np.ndim(x) else p[0]
        if self.code == CODE_LINEAR:
            return p[0] + p[1] * np.asarray(x, dtype=float) if np.ndim(x) else p[0] + p[1] * x
        if self.code == CODE_TANH:
            return p[0] * np.tanh(p[1] * np.asarray(x) + p[2]) + p[3]
        return p[0] * np.sin(p[1] * np.asarray(x) + p[2]) + p[3]

    def deriv(self, x):
        p = self.params
        x = np.asarray(x, dtype=float)
        if self.code == CODE_CONSTANT:
            return np.zeros_like(x)
        if self.code == CODE_LINEAR:
            return np.full_like(x, p[1])
        if self.code == CODE_TANH:
            t = np.tanh(p[1] * x + p[2])
            return p[0] * p[1] * (1.0 - t * t)
        return p[0] * p[1] * np.cos(p[1] * x + p[2])

    def __call__(self, x):
        return self.value(x)

    @property
    def bounded(self) -> bool:
        if self.code in (CODE_TANH, CODE_SINE, CODE_CONSTANT):
            return True
        return self.params[1] == 0.0  # linear with zero slope is a constant

    @property
    def bounded_deriv(self) -> bool:
        return True  # every registered form has a bounded derivative

    @property
    def sup(self) -> float:
        """Upper bound for sup |f|; infinite for unbounded presets."""
        p = self.params
        if self.code == CODE_CONSTANT:
            return abs(p[0])
        if self.code == CODE_LINEAR:
            return abs(p[0]) if p[1] == 0.0 else math.inf
        return abs(p[0]) + abs(p[3])

    def kernel_pack(self) -> tuple[int, np.ndarray]:
        pad = np.zeros(_N_KERNEL_PARAMS)
        pad[: len(self.params)] = self.params
        return self.code, pad

    def spec_string(self) -> str:
        inner = ", ".join(repr(float(v)) for v in self.params)
        return f"{self.name}({inner})"


_REGISTRY = {
    "constant": (CODE_CONSTANT, 1, 1),
    "linear": (CODE_LINEAR, 2, 2),
    "tanh": (CODE_TANH, 1, 4),
    "sine": (CODE_SINE, 1, 4),
}


def make_coef(name: str, *params: float) -> CoefPreset:
    """Build a preset from its registry name and numeric parameters."""
    if name == "identity":
        if params:
            raise InvalidArgumentError("identity takes no parameters")
        return CoefPreset(name="identity", params=(0.0, 1.0), code=CODE_LINEAR)
    if name not in _REGISTRY:
        raise InvalidArgumentError(
            f"unknown coefficient preset {name!r}; known: "
            f"{sorted(_REGISTRY) + ['identity']}"
        )
    code, lo, hi = _REGISTRY[name]
    if not (lo <= len(params) <= hi):
        raise InvalidArgumentError(
            f"preset {name!r} takes between {lo} and {hi} parameters, got {len(params)}"
        )
    full = list(params)
    if code in (CODE_TANH, CODE_SINE):
        defaults = [1.0, 1.0, 0.0, 0.0]
        full = full + defaults[len(full):]
    return CoefPreset(name=name, params=tuple(float(v) for v in full), code=code)


@dataclass(frozen=True)
class TestFunction:
    """A twice-differentiable test function for the generator, given by
    polynomial coefficients (ascending order)."""

    coeffs: tuple[float, ...]

    def value(self, x: float) -> float:
        return float(np.polynomial.polynomial.polyval(x, self.coeffs))

    def d1(self, x: float) -> float:
        c = np.polynomial.polynomial.polyder(self.coeffs)
        return float(np.polynomial.polynomial.polyval(x, c))

    def d2(self, x: float) -> float:
        c = np.polynomial.polynomial.polyder(self.coeffs, 2)
        return float(np.polynomial.polynomial.polyval(x, c))


def poly_fn(*coeffs: float) -> TestFunction:
    """Polynomial test function with ascending coefficients, e.g.
    poly_fn(0, 0, 1) is x**2."""
    if not coeffs:
        raise InvalidArgumentError("need at least one coefficient")
    return TestFunction(coeffs=tuple(float(c) for c in coeffs))
