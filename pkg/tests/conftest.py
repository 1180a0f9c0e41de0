import numpy as np
import pytest

from obsx.numerics import StepControl
from obsx.observer_compact import planar_setup, run_continuous
from obsx.observer_openset import (chemostat_candidate_k, chemostat_chart,
                                   run_openset)
from obsx.systems import (ChemostatParams, chemostat_model, constant_input,
                          sinusoid_input)

PLANAR_HORIZON = 800.0
CHEMOSTAT_HORIZON = 60.0
OPENSET_CTRL = StepControl(dt=0.01, mode="adaptive", abs_tol=1e-6,
                           rel_tol=1e-6, max_step=0.1)


@pytest.fixture(scope="session")
def planar():
    return planar_setup()


def planar_random_input(rng, clip_box):
    kind = rng.integers(0, 3)
    if kind == 0:
        return constant_input([rng.uniform(-1, 1)], clip_box)
    if kind == 1:
        return sinusoid_input(rng.uniform(0.2, 1.0), rng.uniform(0.3, 2.0),
                              clip_box, phase=rng.uniform(0.0, 6.28))
    return constant_input([0.0], clip_box)


@pytest.fixture(scope="session")
def planar_runs(planar):
    """20 seeded continuous-observer runs with random states and inputs."""
    model, cert, spec, gains = planar
    runs = []
    for i in range(20):
        rng = np.random.default_rng(1000 + i)
        x0 = rng.uniform(-3, 3, 2)
        xi0 = rng.uniform(-3, 3, 2)
        u_sig = planar_random_input(rng, model.input_box)
        traj, report = run_continuous(model, cert, spec, x0, xi0,
                                      PLANAR_HORIZON, u_sig,
                                      ctrl=StepControl(dt=0.05), seed=i)
        runs.append({"traj": traj, "report": report, "x0": x0, "xi0": xi0,
                     "u": u_sig, "seed": i})
    return runs


@pytest.fixture(scope="session")
def chemostat():
    params = ChemostatParams()
    chart, obs_params = chemostat_chart(params)
    return {"params": params, "model": chemostat_model(params), "chart": chart,
            "obs_params": obs_params, "k": chemostat_candidate_k(params),
            "clip": np.array([[params.theta, 1e6], [params.theta, 1e6]])}


@pytest.fixture(scope="session")
def chemostat_runs(chemostat):
    """50 seeded corrected-observer scenarios on the default chemostat."""
    runs = []
    for i in range(50):
        rng = np.random.default_rng(2000 + i)
        X0 = np.array([rng.uniform(0.3, 1.2), rng.uniform(0.5, 2.0)])
        Z0 = X0 * np.exp(rng.uniform([-0.2, -0.1], [0.8, 0.8]))
        if i % 3 == 0:
            u_sig = sinusoid_input([0.0, rng.uniform(0.1, 0.5)],
                                   [0.0, rng.uniform(0.2, 1.0)],
                                   chemostat["clip"],
                                   offset=[rng.uniform(0.1, 0.45),
                                           rng.uniform(1.2, 2.5)])
        else:
            u_sig = constant_input([rng.uniform(0.1, 0.45),
                                    rng.uniform(1.0, 3.0)], chemostat["clip"])
        traj, report = run_openset(chemostat["model"], chemostat["chart"],
                                   chemostat["k"], X0, Z0, CHEMOSTAT_HORIZON,
                                   u_sig, ctrl=OPENSET_CTRL)
        runs.append({"traj": traj, "report": report, "X0": X0, "Z0": Z0,
                     "u": u_sig, "seed": i})
    return runs
