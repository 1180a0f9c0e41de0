import math

import numpy as np
import pytest

from obsx.lyapunov import BumpFunction, certify
from obsx.numerics import StepControl
from obsx.observer_openset import (DegenerateDenominator, OpenSetChart,
                                   ShiftNotFound, chemostat_candidate_k,
                                   chemostat_candidate_problem, chemostat_chart,
                                   chemostat_growth_grad, chemostat_growth_W,
                                   chemostat_ktilde, chemostat_openset_problem,
                                   correction_gain, corrected_observer_rhs,
                                   growth_envelope_check, pullback_injection,
                                   run_candidate, run_openset,
                                   select_substrate_shift)
from obsx.systems import (ChemostatParams, chemostat_model,
                          chemostat_pullback_field, chemostat_pullback_model,
                          constant_input)

ACTRL = StepControl(dt=0.01, mode="adaptive", abs_tol=1e-6, rel_tol=1e-6,
                    max_step=0.1)


def _identity_chart():
    return OpenSetChart(
        phi=lambda z: np.asarray(z, dtype=float).copy(),
        phi_inv=lambda Z: np.asarray(Z, dtype=float).copy(),
        dphi=lambda z: np.eye(2),
        W=lambda z: 5.0 + float(np.sum(np.square(z))),
        grad_W=lambda z: 2.0 * np.asarray(z, dtype=float),
        K_u=lambda u: 1.0,
        Q=lambda z: np.eye(2),
        c_bound=lambda y, u: 1.0,
        a=8.0, eps=0.5)


# --- pullback -----------------------------------------------------------------

def test_pullback_identity_chart():
    chart = _identity_chart()
    k = lambda Z, y, u: np.array([y - Z[0], 2.0 * (y - Z[1])])
    z = np.array([0.4, -1.1])
    assert np.allclose(pullback_injection(chart, k, z, 0.7, None),
                       k(z, 0.7, None))


def test_pullback_matches_chemostat_closed_form(chemostat):
    params, chart = chemostat["params"], chemostat["chart"]
    k = chemostat["k"]
    kt = chemostat_ktilde(params)
    rng = np.random.default_rng(30)
    for _ in range(1000):
        z = rng.uniform(-3, 2, 2)
        y = rng.uniform(0.01, 2.0)
        u = rng.uniform(params.theta, 2.0, 2)
        generic = pullback_injection(chart, k, z, y, u)
        closed = kt(z, y, u)
        assert np.linalg.norm(generic - closed) < 1e-10
        # linear-system residual of the generic solve
        residual = chart.dphi(z) @ generic - k(chart.phi(z), y, u)
        assert np.linalg.norm(residual) < 1e-12


# --- correction gain ------------------------------------------------------------

def test_gain_zero_below_activation(chemostat):
    chart = chemostat["chart"]
    z = np.zeros(2)               # W = 7 < a = 8: bump is zero
    assert float(chart.W(z)) < chart.a
    kt = chemostat["chart"].ktilde(z, 0.5, np.array([0.1, 2.0]))
    assert correction_gain(chart, z, 0.5, np.array([0.1, 2.0]), kt) == 0.0


def test_gain_zero_on_dominated_branch(chemostat):
    chart = chemostat["chart"]
    z = np.array([1.0, 1.0])      # W about 13.5, but growth far below c W
    u = np.array([0.1, 2.0])
    kt = chart.ktilde(z, 0.3, u)
    assert correction_gain(chart, z, 0.3, u, kt) == 0.0


def test_gain_hand_quotient_on_active_branch(chemostat):
    params, chart = chemostat["params"], chemostat["chart"]
    z = np.array([0.0, -6.0])
    u = np.array([params.theta, 2.0])
    y = 1.5
    assert float(chart.W(z)) >= chart.a + 1.0
    kt = chart.ktilde(z, y, u)
    gw = chemostat_growth_grad(z)
    num = float(gw @ kt) - chart.c_bound(y, u) * float(chart.W(z))
    assert num > 0.0, "test point must activate the correction"
    denom = (math.exp(z[1]) - math.exp(-z[1])) ** 2
    lam = correction_gain(chart, z, y, u, kt)
    assert lam == pytest.approx(num / denom, rel=1e-12)


def test_degenerate_denominator_raises():
    chart = OpenSetChart(
        phi=lambda z: np.asarray(z, dtype=float).copy(),
        phi_inv=lambda Z: np.asarray(Z, dtype=float).copy(),
        dphi=lambda z: np.eye(2),
        W=lambda z: 9.5 + 0.0 * np.asarray(z, dtype=float)[..., 0],
        grad_W=lambda z: np.array([1.0, 0.0]),
        K_u=lambda u: 1.0,
        Q=lambda z: np.array([[0.0, 0.0], [0.0, 1.0]]),  # annihilates grad_W
        c_bound=lambda y, u: 1.0,
        a=8.0, eps=0.5)
    with pytest.raises(DegenerateDenominator):
        correction_gain(chart, np.zeros(2), 0.0, None, np.array([20.0, 0.0]))


# --- corrected observer field -----------------------------------------------------

def test_rhs_equals_candidate_when_inactive(chemostat):
    chart, k = chemostat["chart"], chemostat["k"]
    Z = np.array([1.0, 0.8])
    u = np.array([0.2, 2.0])
    assert np.allclose(corrected_observer_rhs(chart, k, Z, 0.3, u),
                       k(Z, 0.3, u), atol=1e-14)


def test_composed_correction_reduces_to_substrate_term(chemostat):
    # generic composition == candidate + lam * (1 - Z2^2) in the second slot
    params, chart, k = chemostat["params"], chemostat["chart"], chemostat["k"]
    rng = np.random.default_rng(31)
    hit = 0
    for _ in range(1000):
        z = rng.uniform([-1.0, -7.0], [1.5, 2.0], 2)
        Z = np.exp(z)
        y = rng.uniform(0.01, 2.0)
        u = rng.uniform(params.theta, 2.0, 2)
        lam = correction_gain(chart, z, y, u, chart.ktilde(z, y, u))
        got = corrected_observer_rhs(chart, k, Z, y, u)
        expected = k(Z, y, u) + lam * np.array([0.0, 1.0 - Z[1] ** 2])
        assert np.linalg.norm(got - expected) < 1e-10 * (1.0 + np.linalg.norm(expected))
        hit += lam > 0.0
    assert hit > 20


def test_candidate_matches_plant_on_exact_output(chemostat):
    # the candidate injection equals the plant field whenever H(Z) = y
    params, model, k = chemostat["params"], chemostat["model"], chemostat["k"]
    rng = np.random.default_rng(32)
    for _ in range(200):
        Z = rng.uniform(0.1, 3.0, 2)
        u = rng.uniform(params.theta, 2.0, 2)
        assert np.allclose(k(Z, model.h(Z), u), model.f(Z, u), atol=1e-12)


# --- substrate shift ---------------------------------------------------------------

def test_shift_defaults_and_slack():
    params = ChemostatParams()
    p = select_substrate_shift(params, 0.5)
    assert p == pytest.approx(2.7)
    lhs = params.K * params.mu(math.exp(-p))
    rhs = 4.0 * params.theta * 0.5 * (1.0 - math.exp(-2.0 * p))
    assert lhs < rhs
    # once satisfied, satisfied at every larger shift (Monod monotone)
    for extra in (0.5, 2.0, 10.0):
        lhs2 = params.K * params.mu(math.exp(-(p + extra)))
        rhs2 = 4.0 * params.theta * 0.5 * (1.0 - math.exp(-2.0 * (p + extra)))
        assert lhs2 <= rhs2


def test_shift_trivial_for_vanishing_growth():
    params = ChemostatParams(mu_max=1e-12, gamma_slope=1e-11)
    assert select_substrate_shift(params, 0.5) == pytest.approx(0.1)


def test_shift_respects_monotonicity_interval():
    params = ChemostatParams(S_star=math.exp(-1.0))   # need p >= 1
    p = select_substrate_shift(params, 0.5)
    assert p >= 1.0
    with pytest.raises(ValueError):
        select_substrate_shift(params, 1.5)


def test_chart_validation(chemostat):
    chart = chemostat["chart"]
    chart.validate(np.array([[-2.0, 2.0], [-2.0, 2.0]]),
                   chemostat_pullback_model(chemostat["params"]), n=300)


# --- runs --------------------------------------------------------------------------

def test_run_exact_match_stays_exact(chemostat):
    model, chart, k = chemostat["model"], chemostat["chart"], chemostat["k"]
    u = constant_input([0.1, 2.0], chemostat["clip"])
    X0 = np.array([1.0, 0.5])
    traj, report = run_openset(model, chart, k, X0, X0, 30.0, u, ctrl=ACTRL)
    Xs = np.exp(traj.states[:, :2])
    Zs = np.exp(traj.states[:, 2:])
    assert np.max(np.linalg.norm(Zs - Xs, axis=1)) < 1e-6


def test_run_reference_scenario(chemostat):
    model, chart, k = chemostat["model"], chemostat["chart"], chemostat["k"]
    u = constant_input([0.1, 2.0], chemostat["clip"])
    traj, report = run_openset(model, chart, k, [1.0, 0.5], [3.0, 2.0],
                               60.0, u, ctrl=ACTRL)
    assert report.positivity_margin > 0.0
    assert report.fitted_rate > 0.0 and report.r_squared > 0.99
    # the P-weighted error contracts monotonically on this scenario
    e = np.exp(traj.states[:, 2:]) - np.exp(traj.states[:, :2])
    q = 0.5 * np.sum(e * e, axis=1)
    assert np.all(q[1:] <= q[:-1] * (1.0 + 1e-6))
    assert report.growth_envelope_ok


def test_error_contraction_inequality(chemostat):
    # weighted pairing of corrected injection against the plant contracts at
    # the rate the candidate margin and blending fraction certify
    params, chart = chemostat["params"], chemostat["chart"]
    pm = chemostat_pullback_model(params)
    P = 0.5 * np.eye(2)
    mu_pair = params.theta / 2.0       # sharp candidate constant, this pairing
    rate = chart.eps * mu_pair
    rng = np.random.default_rng(33)
    active = 0
    for _ in range(100_000):
        z = rng.uniform([-7.0, -7.0], [2.0, 2.0])
        x = rng.uniform([-6.0, -6.0], [1.5, 1.5])
        u = rng.uniform(params.theta, 2.0, 2)
        y = pm.h(x)
        kt = chart.ktilde(z, y, u)
        lam = correction_gain(chart, z, y, u, kt)
        active += lam > 0.0
        khat = kt - lam * (chart.Q(z) @ chemostat_growth_grad(z))
        dPh = np.exp(z) - np.exp(x)
        lhs = dPh @ (P @ (np.diag(np.exp(z)) @ khat
                          - np.diag(np.exp(x)) @ chemostat_pullback_field(x, u, params)))
        assert lhs <= -rate * (dPh @ dPh) + 1e-9
    assert active > 100, "sampling never exercised the correction"


def test_growth_envelope_on_reference_run(chemostat):
    model, chart, k = chemostat["model"], chemostat["chart"], chemostat["k"]
    u = constant_input([0.1, 2.0], chemostat["clip"])
    traj, _ = run_openset(model, chart, k, [1.0, 0.5], [3.0, 2.0], 60.0, u,
                          ctrl=ACTRL)
    ok, gap = growth_envelope_check(traj, chart, model, u, chart.ktilde)
    assert ok
    assert gap <= math.log1p(1e-6)


def test_candidate_crosses_zero_corrected_does_not():
    params = ChemostatParams(theta=0.25)
    model = chemostat_model(params)
    chart, _ = chemostat_chart(params)
    k = chemostat_candidate_k(params)
    clip = np.array([[params.theta, 1e6], [params.theta, 1e6]])
    u = constant_input([2.0, 1.0], clip)
    X0, Z0 = [10.0, 0.3], [0.05, 0.01]

    cand_traj, cand_rep = run_candidate(model, k, X0, Z0, 8.0, u,
                                        ctrl=StepControl(dt=0.005))
    assert cand_traj.states[:, 3].min() < 0.0
    assert cand_rep.positivity_violated

    corr_traj, corr_rep = run_openset(model, chart, k, X0, Z0, 8.0, u,
                                      ctrl=ACTRL)
    assert corr_rep.positivity_margin > 0.0
    assert not corr_rep.positivity_violated


# --- certification problems --------------------------------------------------------

def test_certify_candidate_contraction_small(chemostat):
    ineq, problem = chemostat_candidate_problem(chemostat["params"])
    rep = certify(ineq, problem, 20_000, seed=6)
    assert rep.passed


def test_certify_openset_inequality_small(chemostat):
    ineq, problem = chemostat_openset_problem(chemostat["params"],
                                              chart=chemostat["chart"])
    rep = certify(ineq, problem, 20_000, seed=6)
    assert rep.passed
    assert any("c-set" in note for note in rep.notes)
