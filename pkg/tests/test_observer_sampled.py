import math

import numpy as np
import pytest

from obsx.numerics import StepControl
from obsx.observer_sampled import (H4Violation, NoFeasibleR, SampledConfig,
                                   estimate_lipschitz, run_sampled,
                                   select_sampling_diameter, uniform_noise,
                                   zero_error)
from obsx.observer_compact import ObserverSpec, corrected_injection
from obsx.lyapunov import BumpFunction
from obsx.systems import sinusoid_input

SQRT2 = math.sqrt(2.0)


def _config(planar, r=0.1, sigma=0.01, error_model=zero_error, G=None):
    model, cert, spec, gains = planar
    if G is None:
        G = estimate_lipschitz(model, cert, spec, n_samples=20_000, seed=0)
    _, gamma = select_sampling_diameter(G, spec.P_norm, cert.c, gains.mu, sigma)
    return SampledConfig(r=r, G=G, gamma_iss=gamma, sigma=sigma, c=cert.c,
                         mu=gains.mu, P_norm=spec.P_norm,
                         error_model=error_model)


def test_injection_output_slope_inside_sublevel(planar):
    # inside {V <= R} the injection is exactly L (xi1 - y): the difference
    # quotient in w equals |L|
    model, cert, spec, gains = planar
    L_norm = math.hypot(gains.L1, gains.L2)
    xi = np.array([0.5, 0.5])
    u = np.array([0.0])
    d = corrected_injection(xi, 1.0, u, model, cert, spec) \
        - corrected_injection(xi, -1.0, u, model, cert, spec)
    assert np.linalg.norm(d) / 2.0 == pytest.approx(L_norm, rel=1e-12)


def test_output_drift_quotient_reference_pair(planar):
    # |grad_h f(xi) - grad_h f(x)| / |xi - x| = 1 at xi=(1,0), x=(0,0)
    model, _, _, _ = planar
    u = np.array([0.0])
    xi, x = np.array([1.0, 0.0]), np.array([0.0, 0.0])
    drift = float(model.grad_h(xi) @ model.f(xi, u)) \
        - float(model.grad_h(x) @ model.f(x, u))
    assert abs(drift) / np.linalg.norm(xi - x) == pytest.approx(1.0)


def test_lipschitz_estimate_stable_across_draws(planar):
    model, cert, spec, _ = planar
    g1 = estimate_lipschitz(model, cert, spec, n_samples=100_000, seed=0)
    g2 = estimate_lipschitz(model, cert, spec, n_samples=100_000, seed=99)
    assert g1 > 0.0
    assert abs(g1 - g2) / g1 < 0.10


def test_lipschitz_rejects_nonaffine_injection(planar):
    model, cert, spec, _ = planar
    bent = ObserverSpec(P=spec.P, mu=spec.mu,
                        k=lambda xi, y, u: np.array([1.0, 1.0]) * (xi[0] - y) ** 2,
                        bump=BumpFunction(2.0, 3.0))
    with pytest.raises(H4Violation):
        estimate_lipschitz(model, cert, bent, n_samples=2000, seed=0)


def test_diameter_selection_properties(planar):
    model, cert, spec, gains = planar
    G = 15.0
    r, gamma = select_sampling_diameter(G, spec.P_norm, cert.c, gains.mu, 0.01)
    lhs = SQRT2 * G * G * spec.P_norm * r * math.exp(0.01 * r)
    assert lhs < cert.c * gains.mu          # strict inequality with slack
    assert r > 0.0
    # the gain always exceeds its zero-diameter floor
    assert gamma > SQRT2 * G * spec.P_norm / (cert.c * gains.mu)
    # a tiny diameter is always feasible for finite inputs
    assert SQRT2 * G * G * spec.P_norm * 1e-9 * math.exp(0.01e-9) \
        < 0.9 * cert.c * gains.mu


def test_diameter_selection_infeasible_for_huge_lipschitz(planar):
    model, cert, spec, gains = planar
    with pytest.raises(NoFeasibleR):
        select_sampling_diameter(1e12, spec.P_norm, cert.c, gains.mu, 0.01)


def test_config_certification_flag(planar):
    model, cert, spec, gains = planar
    cfg = _config(planar, r=0.1, G=15.0)
    assert not cfg.diameter_certified   # desk-scale r is far above the bound
    r_ok, gamma = select_sampling_diameter(15.0, spec.P_norm, cert.c, gains.mu, 0.01)
    certified = SampledConfig(r=r_ok, G=15.0, gamma_iss=gamma, sigma=0.01,
                              c=cert.c, mu=gains.mu, P_norm=spec.P_norm)
    assert certified.diameter_certified


def test_exact_match_is_invariant(planar):
    # xi0 = x0 and w0 = h(x0) with no noise: the observer rides the plant
    model, cert, spec, _ = planar
    cfg = _config(planar, G=15.0)
    u = sinusoid_input(0.5, 1.0, model.input_box)
    x0 = np.array([1.0, -0.5])
    traj, _ = run_sampled(model, cert, spec, cfg, x0, x0, model.h(x0), 20.0, u,
                          ctrl=StepControl(dt=0.02))
    err = np.linalg.norm(traj.states[:, 2:4] - traj.states[:, :2], axis=1)
    assert err.max() < 1e-9
    w_gap = np.abs(traj.states[:, 4] - traj.states[:, 0])
    assert w_gap.max() < 1e-9


def test_first_sampling_instant_is_r(planar):
    model, cert, spec, _ = planar
    cfg = _config(planar, r=0.1, G=15.0)
    u = sinusoid_input(0.5, 1.0, model.input_box)
    traj, report = run_sampled(model, cert, spec, cfg, [1.0, 1.0], [-2.0, 3.0],
                               0.0, 5.0, u, ctrl=StepControl(dt=0.02))
    assert traj.events[0][0] == pytest.approx(0.1, abs=1e-12)
    assert report.max_interval <= cfg.r + 1e-12


def test_intervals_capped_with_negative_measurements(planar):
    # negative latched w would stretch the schedule without the clamp
    model, cert, spec, _ = planar
    cfg = _config(planar, r=0.1, G=15.0)
    u = sinusoid_input(1.0, 1.0, model.input_box)
    traj, report = run_sampled(model, cert, spec, cfg, [-1.5, 0.5], [1.0, -1.0],
                               -2.0, 30.0, u, ctrl=StepControl(dt=0.02))
    ev = np.array([t for t, _ in traj.events])
    intervals = np.diff(np.concatenate(([0.0], ev)))
    assert intervals.max() <= cfg.r + 1e-12
    assert report.schedule_clamped


def test_noise_free_convergence(planar):
    model, cert, spec, _ = planar
    cfg = _config(planar, G=15.0)
    u = sinusoid_input(0.5, 1.0, model.input_box)
    traj, report = run_sampled(model, cert, spec, cfg, [1.0, 1.0], [-2.0, 3.0],
                               0.0, 800.0, u, ctrl=StepControl(dt=0.02))
    assert report.fitted_rate > 0.0
    assert report.error_ratio < 1e-6


def test_noise_tail_within_gain_bound(planar):
    model, cert, spec, _ = planar
    amp = 0.01
    cfg = _config(planar, G=15.0, error_model=uniform_noise(amp, seed=5))
    u = sinusoid_input(0.5, 1.0, model.input_box)
    _, report = run_sampled(model, cert, spec, cfg, [1.0, 1.0], [-2.0, 3.0],
                            0.0, 400.0, u, ctrl=StepControl(dt=0.02))
    assert report.tail_sup_error <= cfg.gamma_iss * amp
    assert report.tail_sup_error > 0.0


def test_noise_response_roughly_linear(planar):
    model, cert, spec, _ = planar
    u = sinusoid_input(0.5, 1.0, model.input_box)
    tails = []
    for amp in (0.01, 0.02):
        cfg = _config(planar, G=15.0, error_model=uniform_noise(amp, seed=5))
        _, report = run_sampled(model, cert, spec, cfg, [1.0, 1.0], [-2.0, 3.0],
                                0.0, 400.0, u, ctrl=StepControl(dt=0.02))
        tails.append(report.tail_sup_error)
    assert tails[1] <= 2.0 * tails[0] * 1.2
    assert tails[1] >= 2.0 * tails[0] / 1.2
