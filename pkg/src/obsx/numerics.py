"""ODE and hybrid flow/jump integration, gradient checking, decay-rate fitting.

The default integrator is fixed-step classical RK4 so that runs are exactly
reproducible; an embedded RKF45 is available for stiff corners.  Hybrid runs
know their jump instants in advance (the schedule callback returns the next
inter-jump interval), so steps are truncated to land on events exactly and no
root-finding event detection is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NonFiniteDerivative(RuntimeError):
    """The right-hand side produced NaN/inf (state left the model's domain)."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class StepUnderflow(RuntimeError):
    """Adaptive step size fell below the machine-scaled floor."""


class ZenoGuard(RuntimeError):
    """More jumps occurred in one span than the configured maximum."""


class InsufficientWindow(ValueError):
    """Fewer than 10 usable samples in the requested fit window."""


@dataclass
class StepControl:
    """Step-size policy for :func:`integrate` and :func:`integrate_hybrid`.

    ``dt`` is the fixed step (and the initial step in adaptive mode).  The
    tolerances are only consulted in adaptive mode.  ``max_jumps`` caps the
    number of jumps a hybrid run may take before :class:`ZenoGuard` fires.
    """

    dt: float = 1e-2
    mode: str = "fixed"
    abs_tol: float = 1e-9
    rel_tol: float = 1e-9
    max_step: float = math.inf
    max_jumps: int = 1_000_000

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.abs_tol <= 0.0 or self.rel_tol <= 0.0:
            raise ValueError("tolerances must be positive")
        if self.max_step < self.dt:
            raise ValueError("max_step must be >= dt")


@dataclass
class Trajectory:
    """Time-stamped states plus the jump instants of a hybrid run.

    ``times`` is strictly increasing and aligned with ``states`` (one row per
    timestamp).  Every event timestamp coincides with an entry of ``times``;
    the state stored at a jump instant is the post-jump state.
    """

    times: np.ndarray
    states: np.ndarray
    events: list = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times.ndim != 1:
            raise ValueError("times must be one-dimensional")
        if len(self.states) != len(self.times):
            raise ValueError("states and times must have the same length")
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("times must be strictly increasing")
        for t_ev, _tag in self.events:
            idx = np.searchsorted(self.times, t_ev)
            if idx >= len(self.times) or self.times[idx] != t_ev:
                raise ValueError(f"event at t={t_ev} does not coincide with a sample")

    def __len__(self):
        return len(self.times)

    def window(self, t_lo=-math.inf, t_hi=math.inf) -> "Trajectory":
        """Sub-trajectory with t_lo <= t <= t_hi (events filtered accordingly)."""
        mask = (self.times >= t_lo) & (self.times <= t_hi)
        ev = [(t, tag) for (t, tag) in self.events if t_lo <= t <= t_hi]
        return Trajectory(self.times[mask], self.states[mask], ev)


def _rk4_step(rhs, t, x, h):
    k1 = np.asarray(rhs(t, x), dtype=float)
    k2 = np.asarray(rhs(t + 0.5 * h, x + (0.5 * h) * k1), dtype=float)
    k3 = np.asarray(rhs(t + 0.5 * h, x + (0.5 * h) * k2), dtype=float)
    k4 = np.asarray(rhs(t + h, x + h * k3), dtype=float)
    out = x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteDerivative(f"non-finite state update at t={t:.6g}", t=t)
    return out


# Fehlberg 4(5) tableau.
_RKF_B = (
    (1.0 / 4.0,),
    (3.0 / 32.0, 9.0 / 32.0),
    (1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0),
    (439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0),
    (-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0),
)
_RKF_C = (0.0, 1.0 / 4.0, 3.0 / 8.0, 12.0 / 13.0, 1.0, 0.5)
_RKF_W5 = (16.0 / 135.0, 0.0, 6656.0 / 12825.0, 28561.0 / 56430.0, -9.0 / 50.0, 2.0 / 55.0)
_RKF_W4 = (25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -1.0 / 5.0, 0.0)


def _rkf45_step(rhs, t, x, h):
    ks = [np.asarray(rhs(t, x), dtype=float)]
    for i, row in enumerate(_RKF_B):
        xi = x + h * sum(b * k for b, k in zip(row, ks))
        ks.append(np.asarray(rhs(t + _RKF_C[i + 1] * h, xi), dtype=float))
    x5 = x + h * sum(w * k for w, k in zip(_RKF_W5, ks))
    x4 = x + h * sum(w * k for w, k in zip(_RKF_W4, ks))
    if not np.all(np.isfinite(x5)):
        raise NonFiniteDerivative(f"non-finite state update at t={t:.6g}", t=t)
    err = float(np.linalg.norm(x5 - x4))
    return x5, err


def _advance_fixed(rhs, x, t0, t1, dt, times, states):
    """March from (t0, x) to t1 on the dt grid, truncating the final step.

    Appends every step to ``times``/``states`` and returns the final state.
    """
    eps_t = 1e-12 * max(1.0, abs(t1))
    t = t0
    k = 0
    while t < t1 - eps_t:
        t_next = t0 + (k + 1) * dt
        if t_next >= t1 - eps_t:
            t_next = t1
        x = _rk4_step(rhs, t, x, t_next - t)
        t = t_next
        k += 1
        times.append(t)
        states.append(x)
    return t, x


def _advance_adaptive(rhs, x, t0, t1, ctrl, times, states):
    eps_t = 1e-12 * max(1.0, abs(t1))
    t = t0
    h = min(ctrl.dt, ctrl.max_step, t1 - t0)
    while t < t1 - eps_t:
        h = min(h, ctrl.max_step, t1 - t)
        # floor: a step must still advance the clock in floating point
        if t + h == t or h < 1e-200:
            raise StepUnderflow(f"step size underflow at t={t:.6g}")
        x_new, err = _rkf45_step(rhs, t, x, h)
        tol = ctrl.abs_tol + ctrl.rel_tol * float(np.linalg.norm(x))
        if err <= tol:
            t = t + h
            x = x_new
            times.append(t)
            states.append(x)
        # standard fifth-root controller, clipped to avoid thrashing
        factor = 0.9 * (tol / err) ** 0.2 if err > 0.0 else 5.0
        h = h * min(5.0, max(0.2, factor))
    return t, x


def integrate(rhs, x0, t_span, ctrl: StepControl | None = None) -> Trajectory:
    """Integrate ``dx/dt = rhs(t, x)`` over ``t_span = (t0, t1)``.

    Fixed mode uses classical RK4 (local order 5, global order 4); adaptive
    mode uses an embedded RKF45 pair.  The returned trajectory starts at
    (t0, x0) and its final timestamp is exactly t1.
    """
    ctrl = ctrl if ctrl is not None else StepControl()
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError("t_span must satisfy t1 > t0")
    x = np.asarray(x0, dtype=float).copy()
    times = [t0]
    states = [x.copy()]
    if ctrl.mode == "fixed":
        _advance_fixed(rhs, x, t0, t1, ctrl.dt, times, states)
    else:
        _advance_adaptive(rhs, x, t0, t1, ctrl, times, states)
    return Trajectory(np.array(times), np.array(states))


def integrate_hybrid(flow, jump, schedule, x0, t_span,
                     ctrl: StepControl | None = None,
                     event_tag: str = "jump") -> Trajectory:
    """Flow-and-jump integration with a state-scheduled jump sequence.

    ``flow(t, x)`` is the continuous right-hand side, ``jump(t, x)`` maps the
    pre-jump state to the post-jump state, and ``schedule(x)`` returns the
    strictly positive interval until the next jump, re-evaluated on the
    post-jump state.  Integration lands exactly on each jump instant (steps
    are truncated, never interpolated past an event), the jump is applied
    before flowing resumes, and every jump is logged in ``events``.  A jump
    scheduled exactly at the end of the span is still applied.
    """
    ctrl = ctrl if ctrl is not None else StepControl()
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError("t_span must satisfy t1 > t0")
    eps_t = 1e-12 * max(1.0, abs(t1))
    x = np.asarray(x0, dtype=float).copy()
    times = [t0]
    states = [x.copy()]
    events: list = []

    advance = _advance_fixed if ctrl.mode == "fixed" else None
    interval = float(schedule(x))
    if interval <= 0.0:
        raise ValueError("schedule must return strictly positive intervals")
    tau = t0 + interval
    t = t0
    n_jumps = 0
    while True:
        stop = min(tau, t1)
        if stop > t + eps_t:
            if advance is not None:
                t, x = advance(flow, x, t, stop, ctrl.dt, times, states)
            else:
                t, x = _advance_adaptive(flow, x, t, stop, ctrl, times, states)
        if abs(t - tau) <= eps_t and tau <= t1 + eps_t:
            x = np.asarray(jump(t, x), dtype=float)
            if not np.all(np.isfinite(x)):
                raise NonFiniteDerivative(f"non-finite jump at t={t:.6g}", t=t)
            states[-1] = x.copy()
            events.append((t, event_tag))
            n_jumps += 1
            if n_jumps > ctrl.max_jumps:
                raise ZenoGuard(f"more than {ctrl.max_jumps} jumps in one span")
            interval = float(schedule(x))
            if interval <= 0.0:
                raise ValueError("schedule must return strictly positive intervals")
            tau = t + interval
        if t >= t1 - eps_t:
            break
    return Trajectory(np.array(times), np.array(states), events)


def check_gradient(V, grad_V, points: Sequence, h_fd: float = 1e-5) -> float:
    """Max relative mismatch between ``grad_V`` and central differences of ``V``.

    Each coordinate uses step ``h_fd * max(1, |x_i|)``.  The returned value is
    ``max over points of ||grad_V(x) - fd(x)|| / max(1, ||grad_V(x)||)``.
    """
    if h_fd <= 0.0:
        raise ValueError("h_fd must be positive")
    worst = 0.0
    for x in points:
        x = np.asarray(x, dtype=float)
        g = np.asarray(grad_V(x), dtype=float).reshape(-1)
        fd = np.empty_like(g)
        for i in range(x.size):
            h = h_fd * max(1.0, abs(float(x[i])))
            xp = x.copy()
            xp[i] += h
            xm = x.copy()
            xm[i] -= h
            fd[i] = (float(V(xp)) - float(V(xm))) / (2.0 * h)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(fd))):
            raise NonFiniteDerivative(f"non-finite gradient data at x={x}")
        err = float(np.linalg.norm(g - fd)) / max(1.0, float(np.linalg.norm(g)))
        worst = max(worst, err)
    return worst


def fit_decay_rate(traj: Trajectory, error_norm: Callable, t_start: float):
    """Least-squares exponential decay rate of ``error_norm`` over [t_start, end].

    Fits log(error) against t; returns ``(sigma_hat, r_squared)`` where
    ``sigma_hat`` is minus the fitted slope.  Samples with non-positive error
    are excluded from the window.  Raises :class:`InsufficientWindow` if fewer
    than 10 samples remain.
    """
    mask = traj.times >= t_start - 1e-12
    ts = traj.times[mask]
    sts = traj.states[mask]
    try:
        errs = np.asarray(error_norm(sts), dtype=float)
        if errs.shape != ts.shape:
            raise ValueError
    except Exception:
        errs = np.array([float(error_norm(s)) for s in sts])
    keep = errs > 0.0
    ts, errs = ts[keep], errs[keep]
    if ts.size < 10:
        raise InsufficientWindow(f"only {ts.size} usable samples after t_start={t_start}")
    y = np.log(errs)
    A = np.stack([ts, np.ones_like(ts)], axis=1)
    coef, _, _, _ = np.linalg.lstsq(A, y, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    resid = y - (slope * ts + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot < 1e-300 else 1.0 - ss_res / ss_tot
    return -slope, r2
