"""Plant models and input signals.

Two plants ship with the toolkit: a planar system with saturating cubic
nonlinearities and scalar output, and a two-state chemostat (biomass and
substrate, Monod growth) both in its original positive-quadrant coordinates
and pulled back to the plane through the componentwise-exponential chart.

All models here are single-output: ``h`` returns a float and ``grad_h`` the
corresponding gradient row.  Scalar fields passed around the toolkit accept
batched inputs (arrays whose last axis is the state dimension).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import check_gradient

logger = logging.getLogger(__name__)


class InputOutOfRange(ValueError):
    """An input value lies outside the admissible set."""


class DomainViolation(RuntimeError):
    """A state left the open set on which the model is defined."""


@dataclass
class SystemModel:
    """Plant container: dimensions, vector field, output map, input bounds.

    ``f(x, u)`` takes the state and the input vector (shape ``(m,)``) and
    returns the state derivative.  ``h(x)`` returns the scalar output and
    ``grad_h(x)`` its gradient; ``input_box`` is an ``(m, 2)`` array of
    per-component admissible bounds.
    """

    n: int
    m: int
    k: int
    f: Callable
    h: Callable
    grad_h: Callable
    input_box: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.input_box = np.asarray(self.input_box, dtype=float).reshape(self.m, 2)

    def validate(self, state_box, n_points: int = 100, seed: int = 0) -> float:
        """Finite-difference check of grad_h against h on random points.

        Returns the max relative error; the shipped models stay below 1e-6.
        """
        rng = np.random.default_rng(seed)
        box = np.asarray(state_box, dtype=float).reshape(self.n, 2)
        pts = rng.uniform(box[:, 0], box[:, 1], size=(n_points, self.n))
        ubox = np.where(np.isfinite(self.input_box), self.input_box,
                        np.sign(self.input_box) * 1e3)
        us = rng.uniform(ubox[:, 0], ubox[:, 1], size=(n_points, self.m))
        for x, u in zip(pts, us):
            fx = np.asarray(self.f(x, u), dtype=float)
            if not (np.all(np.isfinite(fx)) and math.isfinite(float(self.h(x)))):
                raise DomainViolation(f"model evaluation not finite at x={x}, u={u}")
        return check_gradient(self.h, self.grad_h, pts)


# ---------------------------------------------------------------------------
# planar benchmark: cubic damping in both states, scalar position output
# ---------------------------------------------------------------------------

def planar_field(x, u: float):
    """Vector field (-x1^3 + x2, -x2^3 + u) for scalar u in [-1, 1]."""
    if abs(u) > 1.0:
        raise InputOutOfRange(f"|u| = {abs(u)} exceeds 1")
    return np.array([-x[0] ** 3 + x[1], -x[1] ** 3 + u])


def planar_output(x) -> float:
    return float(x[0])


def planar_model() -> SystemModel:
    return SystemModel(
        n=2, m=1, k=1,
        f=lambda x, u: planar_field(x, float(u[0])),
        h=planar_output,
        grad_h=lambda x: np.array([1.0, 0.0]),
        input_box=np.array([[-1.0, 1.0]]),
        name="planar",
    )


# ---------------------------------------------------------------------------
# chemostat: biomass X1, substrate X2, dilution u1 and feed u2 both >= theta
# ---------------------------------------------------------------------------

@dataclass
class ChemostatParams:
    """Chemostat constants and the Monod growth law.

    ``gamma_slope`` is a certified slope with mu(S) <= gamma_slope * S for all
    S > 0 (for Monod, mu_max / k_s works), and ``S_star`` bounds the interval
    on which mu is non-decreasing (infinite for Monod).
    """

    K: float = 2.0
    theta: float = 0.05
    b: float = 0.02
    mu_max: float = 0.4
    k_s: float = 0.5
    gamma_slope: float = 0.8
    S_star: float = math.inf

    def __post_init__(self):
        if min(self.K, self.theta, self.mu_max, self.k_s, self.gamma_slope) <= 0.0:
            raise ValueError("K, theta, mu_max, k_s, gamma_slope must be positive")
        if self.b < 0.0:
            raise ValueError("mortality rate b must be non-negative")
        if self.S_star <= 0.0:
            raise ValueError("S_star must be positive")

    def mu(self, S):
        """Monod growth rate mu_max * S / (k_s + S); accepts arrays."""
        return self.mu_max * S / (self.k_s + S)

    def mu_prime(self, S):
        return self.mu_max * self.k_s / (self.k_s + S) ** 2

    def validate(self, s_max: float = 50.0, n: int = 2000) -> None:
        """Sampled growth-law invariants: mu(0)=0, 0<mu<=mu_max, slope bound,
        non-decreasing up to S_star."""
        if self.mu(0.0) != 0.0:
            raise ValueError("mu(0) must be 0")
        grid = np.linspace(1e-9, s_max, n)
        vals = self.mu(grid)
        if np.any(vals <= 0.0) or np.any(vals > self.mu_max + 1e-12):
            raise ValueError("mu must satisfy 0 < mu(S) <= mu_max for S > 0")
        if np.any(vals > self.gamma_slope * grid + 1e-12):
            raise ValueError("mu(S) <= gamma_slope * S violated on grid")
        hi = min(self.S_star, s_max)
        mono = self.mu(np.linspace(0.0, hi, n))
        if np.any(np.diff(mono) < -1e-12):
            raise ValueError("mu must be non-decreasing on [0, S_star]")


def chemostat_field(X, u, params: ChemostatParams):
    """Original-coordinate field: biomass growth/washout and substrate balance.

    Requires X strictly inside the open positive quadrant; u = (dilution,
    feed concentration), both bounded below by theta.
    """
    if X[0] <= 0.0 or X[1] <= 0.0:
        raise DomainViolation(f"chemostat state {X} is outside the open quadrant")
    mu = params.mu(X[1])
    return np.array([
        X[0] * (mu - u[0] - params.b),
        u[0] * (u[1] - X[1]) - params.K * mu * X[0],
    ])


def chemostat_output(X, params: ChemostatParams) -> float:
    """Measured growth rate mu(S) * X (gas production in digester setups)."""
    return float(params.mu(X[1]) * X[0])


def chemostat_model(params: ChemostatParams | None = None) -> SystemModel:
    p = params if params is not None else ChemostatParams()
    return SystemModel(
        n=2, m=2, k=1,
        f=lambda X, u: chemostat_field(X, u, p),
        h=lambda X: chemostat_output(X, p),
        grad_h=lambda X: np.array([p.mu(X[1]), p.mu_prime(X[1]) * X[0]]),
        input_box=np.array([[p.theta, math.inf], [p.theta, math.inf]]),
        name="chemostat",
    )


def chemostat_pullback_field(x, u, params: ChemostatParams):
    """Chemostat field in log coordinates x = (log X, log S).

    The substrate consumption term is evaluated as
    K * mu_max * exp(x1) / (k_s + exp(x2)), which equals
    K * mu(exp(x2)) * exp(x1 - x2) but stays finite as x2 -> -inf.
    """
    ex2 = math.exp(x[1])
    mu = params.mu_max * ex2 / (params.k_s + ex2)
    consumption = params.K * params.mu_max * math.exp(x[0]) / (params.k_s + ex2)
    return np.array([
        mu - u[0] - params.b,
        u[0] * (u[1] * math.exp(-x[1]) - 1.0) - consumption,
    ])


def chemostat_pullback_output(x, params: ChemostatParams) -> float:
    return float(params.mu(math.exp(x[1])) * math.exp(x[0]))


def chemostat_pullback_model(params: ChemostatParams | None = None) -> SystemModel:
    p = params if params is not None else ChemostatParams()

    def grad_h(x):
        ex1, ex2 = math.exp(x[0]), math.exp(x[1])
        return np.array([p.mu(ex2) * ex1, p.mu_prime(ex2) * ex2 * ex1])

    return SystemModel(
        n=2, m=2, k=1,
        f=lambda x, u: chemostat_pullback_field(x, u, p),
        h=lambda x: chemostat_pullback_output(x, p),
        grad_h=grad_h,
        input_box=np.array([[p.theta, math.inf], [p.theta, math.inf]]),
        name="chemostat_pullback",
    )


# ---------------------------------------------------------------------------
# admissible input signals
# ---------------------------------------------------------------------------

@dataclass
class InputSignal:
    """Input generator clipped to the admissible box.

    Values outside ``clip_box`` are clipped (with a one-time warning) rather
    than rejected, since scenario files are human-written.
    """

    kind: str
    clip_box: np.ndarray
    value: np.ndarray | None = None
    amplitude: np.ndarray | None = None
    frequency: np.ndarray | None = None
    phase: np.ndarray | None = None
    offset: np.ndarray | None = None
    times: np.ndarray | None = None
    values: np.ndarray | None = None
    _warned: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.clip_box = np.asarray(self.clip_box, dtype=float).reshape(-1, 2)

    @property
    def m(self) -> int:
        return self.clip_box.shape[0]

    def __call__(self, t: float) -> np.ndarray:
        if self.kind == "constant":
            raw = self.value
        elif self.kind == "sinusoid":
            raw = self.offset + self.amplitude * np.sin(self.frequency * t + self.phase)
        elif self.kind == "piecewise":
            idx = int(np.searchsorted(self.times, t, side="right")) - 1
            raw = self.values[max(idx, 0)]
        else:
            raise ValueError(f"unknown input kind {self.kind!r}")
        clipped = np.clip(raw, self.clip_box[:, 0], self.clip_box[:, 1])
        if not self._warned and np.any(clipped != raw):
            logger.warning("input signal clipped to admissible box at t=%.6g", t)
            self._warned = True
        return clipped


def constant_input(value, clip_box) -> InputSignal:
    sig = InputSignal(kind="constant", clip_box=clip_box)
    sig.value = np.atleast_1d(np.asarray(value, dtype=float))
    return sig


def sinusoid_input(amplitude, frequency, clip_box, phase=0.0, offset=0.0) -> InputSignal:
    sig = InputSignal(kind="sinusoid", clip_box=clip_box)
    m = sig.m
    sig.amplitude = np.broadcast_to(np.asarray(amplitude, dtype=float), (m,)).copy()
    sig.frequency = np.broadcast_to(np.asarray(frequency, dtype=float), (m,)).copy()
    sig.phase = np.broadcast_to(np.asarray(phase, dtype=float), (m,)).copy()
    sig.offset = np.broadcast_to(np.asarray(offset, dtype=float), (m,)).copy()
    return sig


def piecewise_input(times, values, clip_box) -> InputSignal:
    sig = InputSignal(kind="piecewise", clip_box=clip_box)
    sig.times = np.asarray(times, dtype=float)
    sig.values = np.asarray(values, dtype=float).reshape(len(sig.times), sig.m)
    if np.any(np.diff(sig.times) <= 0.0):
        raise ValueError("piecewise breakpoints must be strictly increasing")
    return sig
