"""Continuous-time observer with a radial correction that globalizes a local
candidate injection.

The candidate injection k is kept unchanged inside the attracting sublevel set
{V <= R}; outside, a non-negative scalar ``correction_scale`` removes exactly
the part of the certificate derivative that the candidate fails to dissipate,
by pushing along -grad V.  A smoothstep blends the candidate term in over the
shell [a, b].  The planar benchmark ships with its gain synthesis and the
specialized closed-form injection used to cross-check the generic path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .lyapunov import BumpFunction, LyapunovCertificate, entry_time_bound
from .numerics import StepControl, Trajectory, fit_decay_rate, integrate
from .reports import RunReport
from .systems import SystemModel, planar_model

GRADIENT_FLOOR = 1e-12

SQRT10_HALF = math.sqrt(10.0) / 2.0

# planar defaults: shell [2, 3], P parameters q = 32 and p = sqrt(2)/10411
PLANAR_A = 2.0
PLANAR_B = 3.0
PLANAR_Q = 32.0
PLANAR_P = math.sqrt(2.0) / 10411.0


class VanishingGradient(RuntimeError):
    """|grad V| vanished above the sublevel set: the certificate has a
    critical point where the correction needs to divide by it."""


class Infeasible(ValueError):
    """A gain feasibility inequality is violated; the message names it."""


@dataclass
class ObserverSpec:
    """Candidate-observer data: weighting P, contraction margin mu, injection
    k(xi, y, u), and the smoothstep over the certificate shell.

    K1 and K2 are the extreme eigenvalues of P, so K1 |x|^2 <= x' P x <= K2
    |x|^2; ``P_norm`` is the induced 2-norm (= K2 for symmetric PD).
    """

    P: np.ndarray
    mu: float
    k: Callable
    bump: BumpFunction
    K1: float = field(init=False)
    K2: float = field(init=False)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        if not np.allclose(self.P, self.P.T, rtol=0.0, atol=1e-12 * np.abs(self.P).max()):
            raise ValueError("P must be symmetric")
        evals = np.linalg.eigvalsh(self.P)
        self.K1, self.K2 = float(evals[0]), float(evals[-1])
        if self.K1 <= 0.0:
            raise ValueError("P must be positive definite")
        if self.mu <= 0.0:
            raise ValueError("mu must be positive")

    @property
    def P_norm(self) -> float:
        return self.K2

    def validate(self, seed: int = 0, n: int = 1000) -> None:
        """Sampled check of the eigenvalue sandwich K1|x|^2 <= x'Px <= K2|x|^2."""
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(n, self.P.shape[0]))
        quad = np.einsum("ij,jk,ik->i", pts, self.P, pts)
        nrm2 = np.sum(pts * pts, axis=1)
        if np.any(quad < self.K1 * nrm2 - 1e-9) or np.any(quad > self.K2 * nrm2 + 1e-9):
            raise ValueError("eigenvalue bounds violated on samples")


def correction_scale(xi, y, u, model: SystemModel, cert: LyapunovCertificate,
                     spec: ObserverSpec, f_xi=None) -> float:
    """Non-negative magnitude of the radial correction.

    Zero whenever the (bump-blended) candidate already dissipates the
    certificate: max(0, grad V . f + W + bump(V) * grad V . k).
    """
    if f_xi is None:
        f_xi = model.f(xi, u)
    g = np.asarray(cert.grad_V(xi), dtype=float)
    raw = float(g @ f_xi) + float(cert.W(xi)) \
        + spec.bump(cert.V(xi)) * float(g @ spec.k(xi, y, u))
    return raw if raw > 0.0 else 0.0


def corrected_injection(xi, y, u, model: SystemModel, cert: LyapunovCertificate,
                        spec: ObserverSpec, f_xi=None) -> np.ndarray:
    """Injection k inside {V <= R}; outside, k minus the radial correction
    (correction_scale / |grad V|^2) * grad V."""
    k_val = np.asarray(spec.k(xi, y, u), dtype=float)
    v = float(cert.V(xi))
    if v <= cert.R:
        return k_val
    g = np.asarray(cert.grad_V(xi), dtype=float)
    g2 = float(g @ g)
    if g2 <= GRADIENT_FLOOR:
        raise VanishingGradient(
            f"|grad V|^2 = {g2:.3e} at V = {v:.6g} > R; invalid certificate")
    if f_xi is None:
        f_xi = model.f(xi, u)
    raw = float(g @ f_xi) + float(cert.W(xi)) + spec.bump(v) * float(g @ k_val)
    if raw <= 0.0:
        return k_val
    return k_val - (raw / g2) * g


def observer_rhs(xi, y, u, model: SystemModel, cert: LyapunovCertificate,
                 spec: ObserverSpec) -> np.ndarray:
    """Observer vector field f(xi, u) + corrected injection."""
    f_xi = model.f(xi, u)
    return f_xi + corrected_injection(xi, y, u, model, cert, spec, f_xi=f_xi)


# ---------------------------------------------------------------------------
# planar instance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanarGainParams:
    """Planar injection gains and the feasibility data they were checked
    against: gain_cap is (2a^2 - 5) / (16 sqrt(2) b) and q_floor is
    16 sqrt(2) b / (2a^2 - 5)."""

    p: float
    q: float
    a: float
    b: float
    L1: float
    L2: float
    mu: float
    gain_cap: float
    q_floor: float
    feasible: bool


def planar_gains(p: float, q: float, a: float, b: float,
                 require_feasible: bool = True) -> PlanarGainParams:
    """Injection gains for the planar benchmark with contraction margin p/4.

    L1 = -p (q + 2 + 3b + 36 q b^2) / (2 (q - p^2)) and L2 completes the
    cross-term cancellation in the P-weighted error form.  Feasibility
    requires max(|L1|, |L2|) <= gain_cap and q > q_floor (both strict shell
    conditions); violation raises :class:`Infeasible` naming the inequality.
    """
    if not (p > 0.0 and q > p * p):
        raise ValueError("gains require q > p^2 and p > 0")
    if not (b > a > SQRT10_HALF):
        raise ValueError("gains require b > a > sqrt(10)/2")
    scale = (q + 2.0 + 3.0 * b + 36.0 * q * b * b) / (2.0 * (q - p * p))
    L1 = -p * scale
    L2 = -(p * p * scale + 1.0) / q
    gain_cap = (2.0 * a * a - 5.0) / (16.0 * math.sqrt(2.0) * b)
    q_floor = 16.0 * math.sqrt(2.0) * b / (2.0 * a * a - 5.0)
    ok_cap = max(abs(L1), abs(L2)) <= gain_cap
    ok_q = q > q_floor
    feasible = ok_cap and ok_q
    if require_feasible and not feasible:
        which = []
        if not ok_cap:
            which.append(f"max(|L1|, |L2|) = {max(abs(L1), abs(L2)):.6g} "
                         f"> gain cap {gain_cap:.6g}")
        if not ok_q:
            which.append(f"q = {q:.6g} <= floor {q_floor:.6g} (strict inequality)")
        raise Infeasible("; ".join(which))
    return PlanarGainParams(p=p, q=q, a=a, b=b, L1=L1, L2=L2, mu=p / 4.0,
                            gain_cap=gain_cap, q_floor=q_floor, feasible=feasible)


def planar_P(gains: PlanarGainParams) -> np.ndarray:
    return 0.5 * np.array([[1.0, -gains.p], [-gains.p, gains.q]])


def planar_certificate(a: float = PLANAR_A, b: float = PLANAR_B,
                       c: float = 0.5) -> LyapunovCertificate:
    def V(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(x * x, axis=-1)

    return LyapunovCertificate(
        V=V,
        grad_V=lambda x: np.asarray(x, dtype=float),
        W=lambda x: 0.5 * V(x) ** 2,
        R=SQRT10_HALF, a=a, b=b, c=c,
    )


def planar_observer(gains: PlanarGainParams) -> ObserverSpec:
    L = np.array([gains.L1, gains.L2])

    def k(xi, y, u):
        return L * (xi[0] - y)

    return ObserverSpec(P=planar_P(gains), mu=gains.mu, k=k,
                        bump=BumpFunction(gains.a, gains.b))


def planar_setup(p: float = PLANAR_P, q: float = PLANAR_Q, a: float = PLANAR_A,
                 b: float = PLANAR_B):
    """Model, certificate, observer spec and gains for the planar benchmark."""
    gains = planar_gains(p, q, a, b)
    return planar_model(), planar_certificate(a=a, b=b), planar_observer(gains), gains


def planar_corrected_injection(xi, y, u: float, gains: PlanarGainParams,
                               g_bump: BumpFunction) -> np.ndarray:
    """Closed-form planar injection, written out with |xi|^2 switching.

    Independent of :func:`corrected_injection`; the two paths must agree to
    1e-12 and are cross-checked in the tests.
    """
    x1, x2 = float(xi[0]), float(xi[1])
    n2 = x1 * x1 + x2 * x2
    inj = np.array([gains.L1 * (x1 - y), gains.L2 * (x1 - y)])
    if n2 <= math.sqrt(10.0):
        return inj
    v = 0.5 * n2
    raw = (-x1 ** 4 + (x1 + u) * x2 - x2 ** 4 + 0.5 * v * v
           + (x1 - y) * g_bump(v) * (gains.L1 * x1 + gains.L2 * x2))
    if raw <= 0.0:
        return inj
    return inj - (raw / n2) * np.array([x1, x2])


# ---------------------------------------------------------------------------
# planar certification regions
# ---------------------------------------------------------------------------

def planar_problem(model: SystemModel, cert: LyapunovCertificate,
                   spec: ObserverSpec):
    from .lyapunov import CertificationProblem
    return CertificationProblem(model=model, cert=cert, observer=spec)


def planar_h1_spec(cert: LyapunovCertificate, box_half: float = 5.0):
    """Dissipation inequality sampled on {V >= R, |x| <= box_half} x [-1, 1]."""
    from .lyapunov import InequalitySpec, SampleRegion

    def predicate(pt):
        x = pt["x"]
        return float(cert.V(x)) >= cert.R and float(np.linalg.norm(x)) <= box_half

    region = SampleRegion(
        boxes={"x": np.array([[-box_half, box_half]] * 2),
               "u": np.array([[-1.0, 1.0]])},
        predicate=predicate,
    )
    return InequalitySpec(id="H1", region=region)


def _planar_pair_region(cert: LyapunovCertificate, lower_shell: bool):
    from .lyapunov import SampleRegion
    r_xi = math.sqrt(2.0 * cert.b)
    r_x = math.sqrt(2.0 * cert.R)

    def predicate(pt):
        v_xi = float(cert.V(pt["xi"]))
        if lower_shell and not (cert.a < v_xi):
            return False
        return v_xi <= cert.b and float(cert.V(pt["x"])) <= cert.R

    return SampleRegion(
        boxes={"xi": np.array([[-r_xi, r_xi]] * 2),
               "x": np.array([[-r_x, r_x]] * 2),
               "u": np.array([[-1.0, 1.0]])},
        predicate=predicate,
    )


def planar_h2_spec(cert: LyapunovCertificate):
    """Candidate contraction sampled on {V(xi) <= b} x {V(x) <= R} x [-1, 1]."""
    from .lyapunov import InequalitySpec
    return InequalitySpec(id="H2", region=_planar_pair_region(cert, lower_shell=False))


def planar_h3_spec(cert: LyapunovCertificate):
    """Shell growth condition sampled on {a < V(xi) <= b} x {V(x) <= R}."""
    from .lyapunov import InequalitySpec
    return InequalitySpec(id="H3_sufficient",
                          region=_planar_pair_region(cert, lower_shell=True))


# ---------------------------------------------------------------------------
# joint plant/observer simulation
# ---------------------------------------------------------------------------

def run_continuous(model: SystemModel, cert: LyapunovCertificate,
                   spec: ObserverSpec, x0, xi0, horizon: float, u_sig,
                   ctrl: StepControl | None = None,
                   entry_budget: int = 20_000, seed: int = 0):
    """Simulate plant and observer jointly and fit the error decay.

    Returns ``(trajectory, report)`` where the trajectory state is the stacked
    (plant, observer) vector.  The decay fit starts after the entry-time
    bounds of both initial conditions and stops once the error reaches
    1e-10 of its maximum, to keep the regression off the roundoff floor.
    """
    n = model.n
    x0 = np.asarray(x0, dtype=float)
    xi0 = np.asarray(xi0, dtype=float)

    def rhs(t, s):
        x = s[:n]
        xi = s[n:]
        u = u_sig(t)
        fx = model.f(x, u)
        fxi = model.f(xi, u)
        khat = corrected_injection(xi, model.h(x), u, model, cert, spec, f_xi=fxi)
        return np.concatenate((fx, fxi + khat))

    traj = integrate(rhs, np.concatenate((x0, xi0)), (0.0, horizon), ctrl)

    t_plant = entry_time_bound(cert, x0, grid_budget=entry_budget, seed=seed)
    t_obs = entry_time_bound(cert, xi0, grid_budget=entry_budget,
                             level=cert.b, seed=seed + 1)
    t0 = max(t_plant.T, t_obs.T)

    errs = np.linalg.norm(traj.states[:, n:] - traj.states[:, :n], axis=1)
    fitted, r2, m_hat = _fit_error_decay(traj, stacked_error_norm, t0)

    report = RunReport(
        kind="continuous_compact", system=model.name, horizon=horizon,
        initial_error=float(errs[0]), terminal_error=float(errs[-1]),
        error_ratio=float(errs[-1] / errs[0]) if errs[0] > 0.0 else 0.0,
        fitted_rate=fitted, r_squared=r2, m_hat=m_hat,
        entry_time_plant=t_plant.T, entry_time_observer=t_obs.T,
    )
    return traj, report


def stacked_error_norm(states):
    """|second half - first half| of a stacked (plant, observer) state; accepts
    a single state or an array of rows."""
    states = np.asarray(states, dtype=float)
    half = states.shape[-1] // 2
    if states.ndim == 1:
        return float(np.linalg.norm(states[half:] - states[:half]))
    return np.linalg.norm(states[:, half:] - states[:, :half], axis=1)


def _fit_error_decay(traj: Trajectory, error_norm, t_start: float):
    """Decay fit over [t_start, first time the error hits 1e-10 of its max],
    plus the empirical prefactor max over t of error(t) * exp(rate * t)."""
    errs = np.asarray(error_norm(traj.states), dtype=float)
    floor = 1e-10 * float(errs.max()) if errs.max() > 0.0 else 0.0
    below = np.nonzero((traj.times > t_start) & (errs < floor))[0]
    t_end = traj.times[below[0]] if below.size else traj.times[-1]
    win = traj.window(t_start, t_end)
    if len(win) < 10:
        win = traj
    try:
        fitted, r2 = fit_decay_rate(win, error_norm, win.times[0])
    except Exception:
        return 0.0, 0.0, float("nan")
    keep = errs > 0.0
    with np.errstate(over="ignore"):
        m_hat = float(np.max(errs[keep] * np.exp(fitted * traj.times[keep])))
    return fitted, r2, m_hat
