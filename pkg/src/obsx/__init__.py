"""obsx: construction, simulation, and sampling-based certification of
globally convergent nonlinear observers."""

from .lyapunov import (BumpFunction, CertificationProblem, FalsificationReport,
                       InequalitySpec, LyapunovCertificate, SampleRegion, bump,
                       certify, entry_time_bound)
from .numerics import (StepControl, Trajectory, check_gradient, fit_decay_rate,
                       integrate, integrate_hybrid)
from .observer_compact import (ObserverSpec, PlanarGainParams,
                               corrected_injection, correction_scale,
                               observer_rhs, planar_gains, planar_setup,
                               run_continuous)
from .observer_openset import (OpenSetChart, chemostat_chart, correction_gain,
                               corrected_observer_rhs, pullback_injection,
                               run_candidate, run_openset,
                               select_substrate_shift)
from .observer_sampled import (SampledConfig, SampledState, estimate_lipschitz,
                               run_sampled, select_sampling_diameter,
                               uniform_noise)
from .reports import RunReport, compare_runs
from .systems import (ChemostatParams, InputSignal, SystemModel,
                      chemostat_field, chemostat_model, chemostat_pullback_field,
                      chemostat_pullback_model, constant_input, planar_field,
                      planar_model, sinusoid_input)

__version__ = "0.1.0"
