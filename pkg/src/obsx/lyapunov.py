"""Lyapunov certificates and the sampling-based inequality certification engine.

Certification here is falsification by sampling, not formal verification:
points are drawn uniformly from a declared region (rejection sampling against
membership predicates), the inequality's slack is evaluated at each accepted
point, and any violation beyond the slack tolerance is recorded with its
margin.  Candidate points are drawn from a fixed master box, so a violation
found when certifying a sub-region is also found for any containing region
sharing the same master box and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class EmptyShell(RuntimeError):
    """No sample satisfied the shell predicate (bad threshold or box)."""


class RegionUnsatisfiable(RuntimeError):
    """Rejection sampling acceptance rate fell below 1e-3."""


class NonFiniteSlack(RuntimeError):
    """An inequality slack evaluated to NaN or infinity."""


# ---------------------------------------------------------------------------
# bump functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BumpFunction:
    """Locally Lipschitz [0, 1] switch: 0 at or below lo, 1 at or above hi.

    Realized as the cubic smoothstep 3t^2 - 2t^3, which is non-decreasing.
    """

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("bump requires lo < hi")

    def __call__(self, s):
        width = self.hi - self.lo
        if np.ndim(s) == 0:
            t = (float(s) - self.lo) / width
            if t <= 0.0:
                return 0.0
            if t >= 1.0:
                return 1.0
            return t * t * (3.0 - 2.0 * t)
        t = np.clip((np.asarray(s, dtype=float) - self.lo) / width, 0.0, 1.0)
        return t * t * (3.0 - 2.0 * t)


def bump(s, bf: BumpFunction):
    """Evaluate the smoothstep switch ``bf`` at ``s``."""
    return bf(s)


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------

@dataclass
class LyapunovCertificate:
    """Radially unbounded V with dissipation witness W and shell constants.

    ``V``, ``grad_V`` and ``W`` must accept batched inputs (last axis is the
    state dimension).  Constants satisfy R <= a < b and c in (0, 1).  W is
    positive definite when the certificate is used for attractor-style
    arguments (``positive_definite_W``).
    """

    V: Callable
    grad_V: Callable
    W: Callable
    R: float
    a: float
    b: float
    c: float = 0.5
    positive_definite_W: bool = True

    def __post_init__(self):
        if not (self.R <= self.a < self.b):
            raise ValueError("certificate constants must satisfy R <= a < b")
        if not (0.0 < self.c < 1.0):
            raise ValueError("c must lie in (0, 1)")

    def validate(self, dim: int, seed: int = 0, probe_radii=(10.0, 100.0),
                 n_probe: int = 1000) -> list:
        """Heuristic sampled checks; returns a list of notes (empty = clean).

        The radial-unboundedness probe only inspects finitely many spheres and
        is flagged as heuristic, not a proof.
        """
        notes = ["radial-unboundedness probe is heuristic (sampled spheres only)"]
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(n_probe, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        floor = max(self.b, self.R)
        for rho in probe_radii:
            vals = np.asarray(self.V(rho * dirs), dtype=float)
            if np.min(vals) <= floor:
                notes.append(f"V fell below max(R, b) on the radius-{rho} sphere")
        if self.positive_definite_W:
            pts = rng.uniform(-5.0, 5.0, size=(n_probe, dim))
            pts = pts[np.linalg.norm(pts, axis=1) > 1e-8]
            if np.any(np.asarray(self.W(pts), dtype=float) <= 0.0):
                notes.append("W is not positive on sampled nonzero points")
        return notes


def covering_radius(V, level: float, dim: int, seed: int = 0,
                    start: float = 1.0, n_dirs: int = 256) -> float:
    """Radius rho such that V > level everywhere on the sampled rho-sphere.

    Doubles rho until the sampled sphere minimum clears the level; the box
    [-rho, rho]^dim then (heuristically) contains the sublevel set.
    """
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_dirs, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rho = max(start, 1e-6)
    for _ in range(64):
        if float(np.min(np.asarray(V(rho * dirs), dtype=float))) > level:
            return rho
        rho *= 2.0
    raise RuntimeError("radial probe failed: sublevel set does not look bounded")


@dataclass(frozen=True)
class EntryTimeBound:
    """Upper bound T on the time to reach {V <= level}, with the shell
    minimum delta_hat it was computed from (None when already inside)."""

    T: float
    delta_hat: float | None
    level: float
    v_start: float
    n_shell: int


def entry_time_bound(cert: LyapunovCertificate, x0, grid_budget: int = 100_000,
                     level: float | None = None, seed: int = 0) -> EntryTimeBound:
    """Sampled entry-time bound (V(x0) - level) / min{W on the shell}.

    The shell is {level <= V <= V(x0)} intersected with a bounding box from
    radial probing.  The minimum is a uniform-sample minimum polished by
    coordinate descent on the best 1% of points, so the bound errs on the
    small (sound) side only up to sampling resolution.
    """
    if grid_budget < 1000:
        raise ValueError("grid_budget must be at least 1000")
    x0 = np.asarray(x0, dtype=float)
    lvl = cert.R if level is None else float(level)
    v0 = float(cert.V(x0))
    if v0 <= lvl:
        return EntryTimeBound(0.0, None, lvl, v0, 0)

    dim = x0.size
    rng = np.random.default_rng(seed)
    rho = covering_radius(cert.V, v0, dim, seed=seed,
                          start=max(1.0, 2.0 * float(np.linalg.norm(x0))))
    pts = rng.uniform(-rho, rho, size=(grid_budget, dim))
    vv = np.asarray(cert.V(pts), dtype=float)
    shell = pts[(vv >= lvl) & (vv <= v0)]
    if shell.shape[0] == 0:
        raise EmptyShell(f"no sample hit the shell {lvl} <= V <= {v0}")
    ww = np.asarray(cert.W(shell), dtype=float)

    # polish the best 1% by coordinate descent, staying inside the shell
    n_best = max(1, shell.shape[0] // 100)
    order = np.argsort(ww)[:n_best]
    best = shell[order].copy()
    best_w = ww[order].copy()
    step = 0.05 * rho
    for _ in range(15):
        for i in range(dim):
            for sgn in (1.0, -1.0):
                cand = best.copy()
                cand[:, i] += sgn * step
                cv = np.asarray(cert.V(cand), dtype=float)
                cw = np.asarray(cert.W(cand), dtype=float)
                ok = (cv >= lvl) & (cv <= v0) & (cw < best_w)
                best[ok] = cand[ok]
                best_w[ok] = cw[ok]
        step *= 0.6
    delta = float(min(ww.min(), best_w.min()))
    if delta <= 0.0:
        raise EmptyShell("shell minimum of W is not positive; certificate invalid")
    return EntryTimeBound((v0 - lvl) / delta, delta, lvl, v0, int(shell.shape[0]))


# ---------------------------------------------------------------------------
# certification engine
# ---------------------------------------------------------------------------

@dataclass
class SampleRegion:
    """Per-variable boxes plus an optional membership predicate.

    ``boxes`` maps variable names to (d, 2) bound arrays.  Candidate points
    are drawn from ``master`` (defaults to ``boxes``); a point is accepted if
    it lies in ``boxes`` and satisfies ``predicate``.  ``c_set_boxes``, when
    given, describes the degenerate-weighting set probed by the secondary
    check of the open-set inequality.
    """

    boxes: dict
    predicate: Callable | None = None
    master: dict | None = None
    c_set_boxes: dict | None = None


@dataclass
class InequalitySpec:
    """Which inequality to certify and where to sample it."""

    id: str
    region: SampleRegion

    def __post_init__(self):
        if self.id not in _ARITY:
            raise ValueError(f"unknown inequality id {self.id!r}")


@dataclass
class CertificationProblem:
    """Bundle of the objects an inequality reads; unused fields stay None.

    ``observer`` needs attributes P, mu, k (and P_norm); ``chart`` is an
    open-set chart; ``candidate`` is an original-coordinates injection for the
    candidate-observer inequality, with its own P and mu.
    """

    model: object = None
    cert: object = None
    observer: object = None
    chart: object = None
    candidate: Callable = None
    ktilde: Callable = None
    P: np.ndarray = None
    mu: float = None


@dataclass
class FalsificationReport:
    """Outcome of a sampling run: passed iff no violation was recorded."""

    spec_id: str
    samples_tested: int
    attempts: int
    violations: list
    worst_margin: float
    passed: bool
    notes: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "id": self.spec_id,
            "samples": self.samples_tested,
            "attempts": self.attempts,
            "worst_margin": self.worst_margin,
            "passed": self.passed,
            "notes": list(self.notes),
            "violations": [
                {"point": {k: np.asarray(v).tolist() for k, v in pt.items()},
                 "margin": margin}
                for pt, margin in self.violations[:100]
            ],
        }


_ARITY = {
    "H1": ("x", "u"),
    "H2": ("xi", "x", "u"),
    "H3_sufficient": ("xi", "x", "u"),
    "P1": ("Z", "X", "u"),
    "OPEN_SET_39": ("z", "x", "u"),
}


def _slack_h1(problem, pt):
    x, u = pt["x"], pt["u"]
    g = np.asarray(problem.cert.grad_V(x), dtype=float)
    return float(-problem.cert.W(x) - g @ problem.model.f(x, u))


def _slack_h2(problem, pt):
    xi, x, u = pt["xi"], pt["x"], pt["u"]
    model, obs = problem.model, problem.observer
    d = xi - x
    drift = model.f(xi, u) + obs.k(xi, model.h(x), u) - model.f(x, u)
    return float(-obs.mu * (d @ d) - d @ (obs.P @ drift))


def _slack_h3(problem, pt):
    xi, x, u = pt["xi"], pt["x"], pt["u"]
    model, obs, cert = problem.model, problem.observer, problem.cert
    g = np.asarray(cert.grad_V(xi), dtype=float)
    lhs = g @ (model.f(xi, u) + obs.k(xi, model.h(x), u))
    aid = obs.mu * (1.0 - cert.c) / obs.P_norm \
        * float(np.linalg.norm(g)) * float(np.linalg.norm(xi - x))
    return float(-cert.W(xi) + aid - lhs)


def _slack_p1(problem, pt):
    # slack of d/dt[(Z-X)' P (Z-X)] <= -mu |Z-X|^2 along the candidate pairing
    Z, X, u = pt["Z"], pt["X"], pt["u"]
    model = problem.model
    d = Z - X
    drift = problem.candidate(Z, model.h(X), u) - model.f(X, u)
    return float(-problem.mu * (d @ d) - 2.0 * d @ (problem.P @ drift))


def _open_set_denominator(problem, z, x):
    ch = problem.chart
    gW = np.asarray(ch.grad_W(z), dtype=float)
    qg = np.asarray(ch.Q(z), dtype=float) @ gW
    dphi_z = np.asarray(ch.dphi(z), dtype=float)
    dPh = np.asarray(ch.phi(z), dtype=float) - np.asarray(ch.phi(x), dtype=float)
    return float(qg @ (dphi_z.T @ (problem.P @ dPh)))


def _slack_open_set(problem, pt):
    z, x, u = pt["z"], pt["x"], pt["u"]
    ch = problem.chart
    y = problem.model.h(x)
    kt = np.asarray(problem.ktilde(z, y, u), dtype=float)
    gW = np.asarray(ch.grad_W(z), dtype=float)
    Qz = np.asarray(ch.Q(z), dtype=float)
    qg = Qz @ gW
    quad = float(gW @ qg)
    dphi_z = np.asarray(ch.dphi(z), dtype=float)
    dphi_x = np.asarray(ch.dphi(x), dtype=float)
    dPh = np.asarray(ch.phi(z), dtype=float) - np.asarray(ch.phi(x), dtype=float)
    num = float(dPh @ (problem.P @ (dphi_z @ kt - dphi_x @ problem.model.f(x, u))))
    den = float(qg @ (dphi_z.T @ (problem.P @ dPh)))
    rhs = ch.c_bound(y, u) * float(ch.W(z)) + (1.0 - ch.eps) * quad * num / den
    return float(rhs - gW @ kt)


_SLACK = {
    "H1": _slack_h1,
    "H2": _slack_h2,
    "H3_sufficient": _slack_h3,
    "P1": _slack_p1,
    "OPEN_SET_39": _slack_open_set,
}


def _draw_batch(rng, boxes_list, names, m):
    return {nm: rng.uniform(box[:, 0], box[:, 1], size=(m, box.shape[0]))
            for nm, box in zip(names, boxes_list)}


def certify(spec: InequalitySpec, problem: CertificationProblem,
            n_samples: int, slack_tol: float = 1e-9,
            seed: int = 0) -> FalsificationReport:
    """Falsify-or-pass an inequality on ``n_samples`` candidate draws.

    Points are drawn uniformly from the region's master boxes and rejected
    against the boxes and predicate; a point whose slack is below
    ``-slack_tol`` is recorded as a violation with that margin.  Violations
    are returned sorted worst-first.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    names = _ARITY[spec.id]
    slack_fn = _SLACK[spec.id]
    for nm in names:
        if nm not in spec.region.boxes:
            raise ValueError(f"region is missing a box for variable {nm!r}")
    boxes = {nm: np.asarray(spec.region.boxes[nm], dtype=float).reshape(-1, 2)
             for nm in names}
    master_src = spec.region.master or spec.region.boxes
    master = [np.asarray(master_src[nm], dtype=float).reshape(-1, 2) for nm in names]

    rng = np.random.default_rng(seed)
    violations = []
    notes = []
    worst = math.inf
    accepted = 0
    attempts = 0
    rate_checked = False
    batch = 4096
    while attempts < n_samples:
        m = min(batch, n_samples - attempts)
        draws = _draw_batch(rng, master, names, m)
        for i in range(m):
            pt = {nm: draws[nm][i] for nm in names}
            ok = True
            for nm in names:
                box = boxes[nm]
                v = pt[nm]
                if np.any(v < box[:, 0]) or np.any(v > box[:, 1]):
                    ok = False
                    break
            if ok and spec.region.predicate is not None:
                ok = bool(spec.region.predicate(pt))
            if not ok:
                continue
            accepted += 1
            s = slack_fn(problem, pt)
            if not math.isfinite(s):
                raise NonFiniteSlack(f"{spec.id} slack not finite at {pt}")
            if s < worst:
                worst = s
            if s < -slack_tol:
                violations.append((pt, s))
        attempts += m
        if not rate_checked and attempts >= 2000:
            rate_checked = True
            if accepted < attempts * 1e-3:
                raise RegionUnsatisfiable(
                    f"acceptance rate {accepted / attempts:.2e} below 1e-3")
    if accepted == 0:
        raise RegionUnsatisfiable("no sample satisfied the region predicates")

    if spec.id == "H2":
        _note_zero_injection(problem, boxes["xi"], rng, notes)
    if spec.id == "OPEN_SET_39" and spec.region.c_set_boxes:
        _check_c_set(spec, problem, rng, violations, notes)

    violations.sort(key=lambda v: v[1])
    return FalsificationReport(
        spec_id=spec.id,
        samples_tested=accepted,
        attempts=attempts,
        violations=violations,
        worst_margin=worst,
        passed=not violations,
        notes=notes,
    )


def _note_zero_injection(problem, xi_box, rng, notes, n: int = 200):
    """Warn (never fail) when k(xi, h(xi), u) is not zero at exact output match."""
    model, obs = problem.model, problem.observer
    ubox = model.input_box
    ub = np.where(np.isfinite(ubox), ubox, np.sign(ubox) * 1e3)
    worst = 0.0
    for _ in range(n):
        xi = rng.uniform(xi_box[:, 0], xi_box[:, 1])
        u = rng.uniform(ub[:, 0], ub[:, 1])
        worst = max(worst, float(np.linalg.norm(obs.k(xi, model.h(xi), u))))
    if worst > 1e-9:
        notes.append(f"injection not zero at exact output match (max norm {worst:.3e})")


def _check_c_set(spec, problem, rng, violations, notes, n: int = 2000,
                 quad_tol: float = 1e-8):
    """Strict inequality on the degenerate-weighting set: the correction has no
    denominator there, so the uncorrected growth must already be below c*W."""
    ch = problem.chart
    names = ("z", "x", "u")
    boxes = [np.asarray(spec.region.c_set_boxes[nm], dtype=float).reshape(-1, 2)
             for nm in names]
    tested = 0
    for _ in range(n):
        z, x, u = (rng.uniform(b[:, 0], b[:, 1]) for b in boxes)
        if float(ch.W(z)) < ch.a:
            continue
        gW = np.asarray(ch.grad_W(z), dtype=float)
        if float(gW @ (np.asarray(ch.Q(z), dtype=float) @ gW)) > quad_tol:
            continue
        tested += 1
        y = problem.model.h(x)
        margin = ch.c_bound(y, u) * float(ch.W(z)) - float(gW @ problem.ktilde(z, y, u))
        if margin <= 0.0:
            violations.append(({"z": z, "x": x, "u": u, "check": "c_set"}, margin))
    notes.append(f"c-set strict inequality tested on {tested} degenerate samples")
