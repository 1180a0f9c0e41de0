"""Observer for plants evolving on an open set, via a chart onto the plane.

A smooth injective chart maps the plane onto the open set A; the candidate
observer is pulled back through the chart, and a non-negative gain multiplies
a weighted gradient of a radially unbounded growth certificate W to cap the
certificate's growth rate at c(y, u) * W.  Integrating the observer in chart
coordinates keeps its state inside A by construction, while the error
contraction still holds in the original coordinates.

The chemostat instance uses the componentwise exponential chart on the open
positive quadrant, a hard-coded growth certificate, and a weighting that only
corrects the substrate equation; the composed correction there reduces to
lambda * (1 - Z2^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .lyapunov import (BumpFunction, CertificationProblem, InequalitySpec,
                       SampleRegion)
from .numerics import NonFiniteDerivative, StepControl, integrate
from .observer_compact import _fit_error_decay
from .reports import RunReport
from .systems import (ChemostatParams, DomainViolation, SystemModel,
                      chemostat_model, chemostat_pullback_field,
                      chemostat_pullback_model)


class SingularJacobian(RuntimeError):
    """The chart Jacobian is numerically singular at the evaluation point."""


class DegenerateDenominator(RuntimeError):
    """The correction's positive branch was taken where the weighted gradient
    quadratic vanishes; the degenerate-set side condition is violated."""


class ShiftNotFound(RuntimeError):
    """No shift below 100 satisfied the growth-smallness inequality."""


@dataclass
class OpenSetChart:
    """Chart data for an open set A plus the growth certificate on the plane.

    ``phi`` maps the plane onto A, ``phi_inv`` inverts it, ``dphi`` is the
    Jacobian.  ``W``/``grad_W`` is the radially unbounded growth certificate
    with rate bound K_u(u) above level R_growth; ``Q`` is the symmetric
    positive-semidefinite weighting, ``c_bound(y, u) >= 1`` the certified
    growth rate of the pulled-back injection, and the correction activates
    over [a, a + 1] via ``bump``.  ``pullback_f``/``ktilde`` are optional
    closed forms that bypass the per-call Jacobian solve.
    """

    phi: Callable
    phi_inv: Callable
    dphi: Callable
    W: Callable
    grad_W: Callable
    K_u: Callable
    Q: Callable
    c_bound: Callable
    a: float
    eps: float
    R_growth: float = 0.0
    bump: BumpFunction | None = None
    contains: Callable | None = None
    pullback_f: Callable | None = None
    ktilde: Callable | None = None

    def __post_init__(self):
        if not (0.0 < self.eps < 1.0):
            raise ValueError("eps must lie in (0, 1)")
        if self.a <= self.R_growth:
            raise ValueError("activation threshold a must exceed R_growth")
        if self.bump is None:
            self.bump = BumpFunction(self.a, self.a + 1.0)

    def validate(self, box, model: SystemModel, n: int = 1000, seed: int = 0) -> None:
        """Sampled chart invariants: inverse identity, nonsingular Jacobian,
        positive semidefinite weighting, and the growth-rate bound."""
        rng = np.random.default_rng(seed)
        box = np.asarray(box, dtype=float)
        pts = rng.uniform(box[:, 0], box[:, 1], size=(n, box.shape[0]))
        ubox = model.input_box
        ub = np.where(np.isfinite(ubox), ubox, np.sign(ubox) * 1e3)
        us = rng.uniform(ub[:, 0], ub[:, 1], size=(n, model.m))
        for z, u in zip(pts, us):
            back = np.asarray(self.phi_inv(np.asarray(self.phi(z), dtype=float)))
            if np.linalg.norm(back - z) > 1e-10 * (1.0 + np.linalg.norm(z)):
                raise ValueError(f"phi_inv(phi(z)) != z at z={z}")
            if abs(np.linalg.det(np.asarray(self.dphi(z), dtype=float))) < 1e-12:
                raise SingularJacobian(f"det Dphi = 0 at z={z}")
            qe = np.linalg.eigvalsh(np.asarray(self.Q(z), dtype=float))
            if qe.min() < -1e-12:
                raise ValueError("Q must be positive semidefinite")
            w = float(self.W(z))
            if w >= self.R_growth:
                fz = pullback_field(self, model, z, u)
                growth = float(np.asarray(self.grad_W(z)) @ fz)
                if growth > self.K_u(u) * w + 1e-9:
                    raise ValueError(f"growth bound violated at z={z}, u={u}")


def pullback_field(chart: OpenSetChart, model: SystemModel, x, u) -> np.ndarray:
    """Plant field in chart coordinates (closed form when available)."""
    if chart.pullback_f is not None:
        return np.asarray(chart.pullback_f(x, u), dtype=float)
    J = np.asarray(chart.dphi(x), dtype=float)
    return np.linalg.solve(J, np.asarray(model.f(chart.phi(x), u), dtype=float))


def pullback_injection(chart: OpenSetChart, k: Callable, z, y, u) -> np.ndarray:
    """Injection in chart coordinates: solve Dphi(z) kt = k(phi(z), y, u)."""
    J = np.asarray(chart.dphi(z), dtype=float)
    rhs = np.asarray(k(chart.phi(z), y, u), dtype=float)
    try:
        return np.linalg.solve(J, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobian(f"chart Jacobian singular at z={z}") from exc


def correction_gain(chart: OpenSetChart, z, y, u, ktilde_val) -> float:
    """Non-negative gain capping the growth certificate's rate at c(y, u) W.

    Zero on the branch bump(W) grad_W . kt <= c W; otherwise the excess is
    divided by the weighted gradient quadratic, which must be bounded away
    from zero on the positive branch.
    """
    w = float(chart.W(z))
    gw = np.asarray(chart.grad_W(z), dtype=float)
    num = chart.bump(w) * float(gw @ ktilde_val) - chart.c_bound(y, u) * w
    if num <= 0.0:
        return 0.0
    quad = float(gw @ (np.asarray(chart.Q(z), dtype=float) @ gw))
    if quad <= 1e-14:
        raise DegenerateDenominator(
            f"positive branch with vanishing weighted gradient at z={z}")
    return num / quad


def corrected_observer_rhs(chart: OpenSetChart, k: Callable, Z, y, u) -> np.ndarray:
    """Observer field on A: the candidate injection minus the gain times
    Dphi Q grad_W', composed at the chart preimage of Z."""
    Z = np.asarray(Z, dtype=float)
    if chart.contains is not None and not chart.contains(Z):
        raise DomainViolation(f"observer state {Z} is outside the open set")
    z = np.asarray(chart.phi_inv(Z), dtype=float)
    if chart.ktilde is not None:
        kt = np.asarray(chart.ktilde(z, y, u), dtype=float)
    else:
        kt = pullback_injection(chart, k, z, y, u)
    lam = correction_gain(chart, z, y, u, kt)
    k_val = np.asarray(k(Z, y, u), dtype=float)
    if lam == 0.0:
        return k_val
    gw = np.asarray(chart.grad_W(z), dtype=float)
    J = np.asarray(chart.dphi(z), dtype=float)
    return k_val - lam * (J @ (np.asarray(chart.Q(z), dtype=float) @ gw))


# ---------------------------------------------------------------------------
# chemostat instance
# ---------------------------------------------------------------------------

def select_substrate_shift(params: ChemostatParams, eps: float) -> float:
    """Smallest grid shift p in {0.1, 0.2, ...} with
    K mu(e^-p) <= 4 theta (1 - eps) (1 - e^-2p) and -p <= log(S_star).

    The left side vanishes as p grows (mu(0) = 0) while the right side
    increases, so a feasible shift exists for any admissible growth law.
    """
    if not (0.0 < eps < 1.0):
        raise ValueError("eps must lie in (0, 1)")
    log_sstar = math.log(params.S_star) if math.isfinite(params.S_star) else math.inf
    for i in range(1, 1001):
        p = 0.1 * i
        if -p > log_sstar:
            continue
        lhs = params.K * float(params.mu(math.exp(-p)))
        rhs = 4.0 * params.theta * (1.0 - eps) * (1.0 - math.exp(-2.0 * p))
        if lhs <= rhs:
            return p
    raise ShiftNotFound("no shift below 100 satisfies the growth-smallness bound")


@dataclass
class ChemostatObserverParams:
    """Chemostat correction constants: the substrate shift, the activation
    threshold, and the growth-rate closure built from them."""

    p_shift: float
    eps: float
    a: float
    c_bound: Callable = field(repr=False)

    def __post_init__(self):
        # the defining smallness inequality must hold at the stored shift
        if self.p_shift <= 0.0:
            raise ValueError("p_shift must be positive")


def chemostat_candidate_k(params: ChemostatParams) -> Callable:
    """Candidate observer field on the quadrant: linear biomass/substrate
    balance driven by the measured growth rate; exact on H(Z) = y."""

    def k(Z, y, u):
        return np.array([
            -(u[0] + params.b) * Z[0] + y,
            u[0] * (u[1] - Z[1]) - params.K * y,
        ])

    return k


def chemostat_ktilde(params: ChemostatParams) -> Callable:
    """Closed-form pullback of the candidate through the exponential chart."""

    def ktilde(z, y, u):
        return np.array([
            -(u[0] + params.b) + y * math.exp(-z[0]),
            u[0] * (u[1] * math.exp(-z[1]) - 1.0) - params.K * y * math.exp(-z[1]),
        ])

    return ktilde


def chemostat_growth_W(x):
    """Radially unbounded growth certificate on the plane (values >= 7)."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return (np.exp(x1) + 3.0 * np.exp(-x1) + np.exp(2.0 * x1)
            + np.exp(x2) + np.exp(-x2))


def chemostat_growth_grad(x):
    e1, e2 = math.exp(x[0]), math.exp(x[1])
    return np.array([e1 - 3.0 / e1 + 2.0 * e1 * e1, e2 - 1.0 / e2])


def chemostat_chart(params: ChemostatParams | None = None, eps: float = 0.5,
                    a: float = 8.0, R_growth: float = 0.0):
    """Exponential chart onto the open positive quadrant with the chemostat's
    growth certificate, weighting diag(0, 1), and rate closures.

    Returns ``(chart, ChemostatObserverParams)``.  The default activation
    threshold a = 8 sits above the certificate's global minimum of 7.
    """
    p = params if params is not None else ChemostatParams()
    shift = select_substrate_shift(p, eps)
    kq = (p.K * p.gamma_slope / (2.0 * p.theta)) ** 2
    e2p = math.exp(2.0 * shift)

    def c_bound(y, u):
        return max(1.5 * y, u[0] + p.b, u[0] + 0.5 * u[0] * u[1], kq) \
            + 0.25 * p.K * e2p * y + 1.0

    def K_u(u):
        base = p.mu_max - p.theta - p.b
        return max(1.0, base, 2.0 * base + kq, u[0] + p.b,
                   0.5 * u[0] * u[1] + u[0])

    Q_const = np.array([[0.0, 0.0], [0.0, 1.0]])

    chart = OpenSetChart(
        phi=lambda z: np.exp(np.asarray(z, dtype=float)),
        phi_inv=lambda Z: np.log(np.asarray(Z, dtype=float)),
        dphi=lambda z: np.diag(np.exp(np.asarray(z, dtype=float))),
        W=chemostat_growth_W,
        grad_W=chemostat_growth_grad,
        K_u=K_u,
        Q=lambda z: Q_const,
        c_bound=c_bound,
        a=a,
        eps=eps,
        R_growth=R_growth,
        contains=lambda Z: bool(np.all(np.asarray(Z) > 0.0)),
        pullback_f=lambda x, u: chemostat_pullback_field(x, u, p),
        ktilde=chemostat_ktilde(p),
    )
    return chart, ChemostatObserverParams(p_shift=shift, eps=eps, a=a,
                                          c_bound=c_bound)


# ---------------------------------------------------------------------------
# joint runs
# ---------------------------------------------------------------------------

def run_openset(model: SystemModel, chart: OpenSetChart, k: Callable, X0, Z0,
                horizon: float, u_sig, ctrl: StepControl | None = None,
                pull_model: SystemModel | None = None):
    """Plant and corrected observer, integrated in chart coordinates.

    ``model`` is the plant in original coordinates.  Both trajectories are
    advanced on the plane (so the observer's image stays strictly inside the
    open set) and mapped through the chart for reporting.  Returns
    ``(trajectory, report)`` with stacked chart states (x..., z...); a
    numerical escape from the open set raises DomainViolation with the
    timestamp.
    """
    n = model.n
    x0 = np.asarray(chart.phi_inv(np.asarray(X0, dtype=float)), dtype=float)
    z0 = np.asarray(chart.phi_inv(np.asarray(Z0, dtype=float)), dtype=float)
    ktilde = chart.ktilde if chart.ktilde is not None \
        else (lambda z, y, u: pullback_injection(chart, k, z, y, u))
    if pull_model is None and chart.pullback_f is None:
        raise ValueError("need a pullback model or a chart with pullback_f")
    pull_f = chart.pullback_f if chart.pullback_f is not None else pull_model.f

    def flow(t, s):
        x = s[:n]
        z = s[n:]
        u = u_sig(t)
        try:
            y = float(model.h(chart.phi(x)))
            kt = np.asarray(ktilde(z, y, u), dtype=float)
            lam = correction_gain(chart, z, y, u, kt)
            zdot = kt
            if lam != 0.0:
                gw = np.asarray(chart.grad_W(z), dtype=float)
                zdot = kt - lam * (np.asarray(chart.Q(z), dtype=float) @ gw)
            return np.concatenate((np.asarray(pull_f(x, u), dtype=float), zdot))
        except OverflowError as exc:
            # chart coordinates left double range: the state is pinned to the
            # boundary closer than the floating-point resolution of the chart
            raise NonFiniteDerivative(
                f"chart evaluation overflowed at t={t:.6g}", t=t) from exc

    try:
        traj = integrate(flow, np.concatenate((x0, z0)), (0.0, horizon), ctrl)
    except NonFiniteDerivative as exc:
        raise DomainViolation(
            f"trajectory left the open set near t={exc.t}") from exc

    Xs = np.apply_along_axis(chart.phi, 1, traj.states[:, :n])
    Zs = np.apply_along_axis(chart.phi, 1, traj.states[:, n:])
    errs = np.linalg.norm(Zs - Xs, axis=1)

    def err_norm(states):
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            return float(np.linalg.norm(chart.phi(states[n:]) - chart.phi(states[:n])))
        a_ = np.apply_along_axis(chart.phi, 1, states[:, :n])
        b_ = np.apply_along_axis(chart.phi, 1, states[:, n:])
        return np.linalg.norm(b_ - a_, axis=1)

    fitted, r2, m_hat = _fit_error_decay(traj, err_norm, 0.0)
    env_ok, env_gap = growth_envelope_check(traj, chart, model, u_sig, ktilde)
    margin = float(min(Zs.min(), Xs.min()))

    report = RunReport(
        kind="openset", system=model.name, horizon=horizon,
        initial_error=float(errs[0]), terminal_error=float(errs[-1]),
        error_ratio=float(errs[-1] / errs[0]) if errs[0] > 0.0 else 0.0,
        fitted_rate=fitted, r_squared=r2, m_hat=m_hat,
        positivity_margin=margin, positivity_violated=bool(margin <= 0.0),
        growth_envelope_ok=env_ok, growth_envelope_gap=env_gap,
    )
    return traj, report


def run_candidate(model: SystemModel, k: Callable, X0, Z0, horizon: float,
                  u_sig, ctrl: StepControl | None = None):
    """Uncorrected candidate observer integrated in original coordinates.

    The candidate field is defined on the whole plane, so its state may leave
    the open set; the report flags that with ``positivity_violated``.
    """
    n = model.n

    def flow(t, s):
        u = u_sig(t)
        y = float(model.h(s[:n]))
        return np.concatenate((np.asarray(model.f(s[:n], u), dtype=float),
                               np.asarray(k(s[n:], y, u), dtype=float)))

    traj = integrate(flow, np.concatenate((np.asarray(X0, dtype=float),
                                           np.asarray(Z0, dtype=float))),
                     (0.0, horizon), ctrl)
    Zs = traj.states[:, n:]
    errs = np.linalg.norm(Zs - traj.states[:, :n], axis=1)
    margin = float(Zs.min())
    report = RunReport(
        kind="openset_candidate", system=model.name, horizon=horizon,
        initial_error=float(errs[0]), terminal_error=float(errs[-1]),
        positivity_margin=margin, positivity_violated=bool(margin <= 0.0),
    )
    return traj, report


def growth_envelope_check(traj, chart: OpenSetChart, model: SystemModel, u_sig,
                          ktilde, n_probe: int = 64, max_checks: int = 2000,
                          probe_half_width: float = 0.5, seed: int = 0):
    """Growth-envelope certificate along a run, checked in log space.

    Builds a pointwise rate bound beta(t) = max(c_bound(y, u), sampled bound
    of the certificate derivative on {W <= a + 1}) and verifies
    log W(z(t)) <= log W(z(0)) + integral of beta + log(1 + 1e-6) on a thinned
    grid.  Returns ``(ok, max_gap)`` with the worst log-space slack.
    """
    n = model.n
    rng = np.random.default_rng(seed)
    probes = []
    half = probe_half_width
    for _ in range(50):
        cand = rng.uniform(-half, half, size=(4 * n_probe, n))
        vals = np.asarray(chart.W(cand), dtype=float)
        probes.extend(cand[vals <= chart.a + 1.0][: n_probe - len(probes)])
        if len(probes) >= n_probe:
            break
        half *= 0.8
    probes = np.array(probes) if probes else np.zeros((1, n))

    stride = max(1, len(traj) // max_checks)
    idx = np.arange(0, len(traj), stride)
    if idx[-1] != len(traj) - 1:
        idx = np.append(idx, len(traj) - 1)
    ts = traj.times[idx]
    xs = traj.states[idx, :n]
    zs = traj.states[idx, n:]

    betas = np.empty(ts.size)
    for j, (t, x) in enumerate(zip(ts, xs)):
        u = u_sig(t)
        y = float(model.h(chart.phi(x)))
        bound = chart.c_bound(y, u)
        for zp in probes:
            gw = chart.grad_W(zp)
            bound = max(bound, float(gw @ ktilde(zp, y, u)))
        betas[j] = max(bound, 1.0)

    logw = np.log(np.asarray(chart.W(zs), dtype=float))
    integral = np.concatenate(([0.0], np.cumsum(
        0.5 * (betas[1:] + betas[:-1]) * np.diff(ts))))
    gap = float(np.max(logw - logw[0] - integral))
    return gap <= math.log1p(1e-6), gap


# ---------------------------------------------------------------------------
# certification problem builders
# ---------------------------------------------------------------------------

def chemostat_candidate_problem(params: ChemostatParams | None = None,
                                z_box=((-5.0, 5.0), (-5.0, 5.0)),
                                x_box=((1e-9, 5.0), (1e-9, 5.0)),
                                u_hi: float = 2.0):
    """Candidate-contraction inequality for the chemostat with P = I/2 and
    margin mu = theta; returns ``(InequalitySpec, CertificationProblem)``."""
    p = params if params is not None else ChemostatParams()
    model = chemostat_model(p)
    region = SampleRegion(boxes={
        "Z": np.asarray(z_box, dtype=float),
        "X": np.asarray(x_box, dtype=float),
        "u": np.array([[p.theta, u_hi], [p.theta, u_hi]]),
    })
    problem = CertificationProblem(model=model,
                                   candidate=chemostat_candidate_k(p),
                                   P=0.5 * np.eye(2), mu=p.theta)
    return InequalitySpec(id="P1", region=region), problem


def chemostat_openset_problem(params: ChemostatParams | None = None,
                              chart: OpenSetChart | None = None,
                              z_box=((-4.0, 2.0), (-4.0, 2.0)),
                              x_box=((-3.0, 2.0), (-3.0, 2.0)),
                              u_hi: float = 2.0):
    """Corrected-growth inequality for the chemostat chart.

    The sampler's predicate enforces the side conditions W(z) >= a and a
    strictly negative weighted-gradient pairing; the degenerate set (second
    chart coordinate equal to zero) is probed through ``c_set_boxes``.
    """
    p = params if params is not None else ChemostatParams()
    if chart is None:
        chart, _ = chemostat_chart(p)
    model = chemostat_pullback_model(p)
    problem = CertificationProblem(model=model, chart=chart,
                                   ktilde=chart.ktilde, P=0.5 * np.eye(2),
                                   mu=p.theta)

    from .lyapunov import _open_set_denominator

    def predicate(pt):
        z = pt["z"]
        if float(chart.W(z)) < chart.a:
            return False
        return _open_set_denominator(problem, z, pt["x"]) < 0.0

    u_box = np.array([[p.theta, u_hi], [p.theta, u_hi]])
    region = SampleRegion(
        boxes={"z": np.asarray(z_box, dtype=float),
               "x": np.asarray(x_box, dtype=float),
               "u": u_box},
        predicate=predicate,
        c_set_boxes={"z": np.array([[z_box[0][0], z_box[0][1]], [0.0, 0.0]]),
                     "x": np.asarray(x_box, dtype=float),
                     "u": u_box},
    )
    return InequalitySpec(id="OPEN_SET_39", region=region), problem
