"""Scenario-driven command line: run simulations, certify inequalities,
compare reports.

Scenarios are TOML files; every run writes a trajectory CSV, a report JSON,
and a plot-ready (t, log error) CSV into its output directory.  Exit codes:
0 success, 2 certification failure, 3 domain violation.  Scenarios passed in
one invocation run in parallel, capped by the OBSX_THREADS environment
variable.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import math
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import lyapunov, observer_compact, observer_openset, observer_sampled
from .numerics import StepControl
from .reports import (RunReport, SchemaMismatch, compare_runs, report_json,
                      write_log_error_csv, write_trajectory_csv)
from .systems import (ChemostatParams, DomainViolation, chemostat_model,
                      constant_input, piecewise_input, sinusoid_input)


class ConfigError(ValueError):
    """A scenario file is missing or misusing a field; the message names it."""


_KINDS = ("continuous_compact", "sampled", "openset", "certify")


def load_scenario(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot open scenario {path}: {exc}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"scenario {path} does not parse: {exc}")
    kind = cfg.get("kind")
    if kind not in _KINDS:
        raise ConfigError(f"{path}: field 'kind' must be one of {_KINDS}")
    if kind != "certify" and "horizon" not in cfg:
        raise ConfigError(f"{path}: field 'horizon' is required")
    cfg.setdefault("system", "planar" if kind in ("continuous_compact", "sampled")
                   else "chemostat")
    cfg.setdefault("seed", 0)
    cfg.setdefault("out_dir", str(Path("out") / path.stem))
    cfg["_path"] = str(path)
    return cfg


def _require(cfg, section, key):
    if key not in cfg.get(section, {}):
        raise ConfigError(f"{cfg['_path']}: field '{section}.{key}' is required")
    return cfg[section][key]


def _chemostat_params(cfg) -> ChemostatParams:
    over = cfg.get("chemostat", {})
    try:
        return ChemostatParams(**over)
    except TypeError as exc:
        raise ConfigError(f"{cfg['_path']}: bad field in [chemostat]: {exc}")


def _build_input(cfg, clip_box, default_kind, **default_kw):
    section = cfg.get("input", {})
    kind = section.get("kind", default_kind)
    if kind == "constant":
        value = section.get("value", default_kw.get("value"))
        if value is None:
            raise ConfigError(f"{cfg['_path']}: field 'input.value' is required")
        return constant_input(value, clip_box)
    if kind == "sinusoid":
        return sinusoid_input(section.get("amplitude", default_kw.get("amplitude", 1.0)),
                              section.get("frequency", default_kw.get("frequency", 1.0)),
                              clip_box,
                              phase=section.get("phase", 0.0),
                              offset=section.get("offset", default_kw.get("offset", 0.0)))
    if kind == "piecewise":
        return piecewise_input(_require(cfg, "input", "times"),
                               _require(cfg, "input", "values"), clip_box)
    raise ConfigError(f"{cfg['_path']}: unknown 'input.kind' {kind!r}")


def _planar_setup(cfg):
    over = cfg.get("observer", {})
    return observer_compact.planar_setup(
        p=over.get("p", observer_compact.PLANAR_P),
        q=over.get("q", observer_compact.PLANAR_Q),
        a=over.get("a", observer_compact.PLANAR_A),
        b=over.get("b", observer_compact.PLANAR_B),
    )


def _ctrl(cfg, default_dt, mode="fixed", abs_tol=1e-9, rel_tol=1e-9,
          max_step=math.inf) -> StepControl:
    return StepControl(dt=float(cfg.get("dt", default_dt)),
                       mode=cfg.get("step_mode", mode),
                       abs_tol=float(cfg.get("abs_tol", abs_tol)),
                       rel_tol=float(cfg.get("rel_tol", rel_tol)),
                       max_step=float(cfg.get("max_step", max_step)))


def _run_continuous(cfg, out: Path) -> int:
    model, cert, spec, gains = _planar_setup(cfg)
    x0 = _require(cfg, "initial", "x0")
    xi0 = _require(cfg, "initial", "xi0")
    u_sig = _build_input(cfg, model.input_box, "sinusoid")
    traj, report = observer_compact.run_continuous(
        model, cert, spec, x0, xi0, float(cfg["horizon"]), u_sig,
        ctrl=_ctrl(cfg, 0.05), seed=int(cfg["seed"]))
    report.seed = int(cfg["seed"])
    report.gains = {"L1": gains.L1, "L2": gains.L2, "mu": gains.mu,
                    "feasible": gains.feasible}
    write_trajectory_csv(out / "trajectory.csv", traj,
                         ["x1", "x2", "xi1", "xi2"])
    write_log_error_csv(out / "plot_data.csv", traj,
                        observer_compact.stacked_error_norm)
    report.write_json(out / "report.json")
    return 0


def _run_sampled(cfg, out: Path) -> int:
    model, cert, spec, gains = _planar_setup(cfg)
    section = cfg.get("sampled", {})
    x0 = _require(cfg, "initial", "x0")
    xi0 = _require(cfg, "initial", "xi0")
    w0 = cfg.get("initial", {}).get("w0", 0.0)
    seed = int(cfg["seed"])
    u_sig = _build_input(cfg, model.input_box, "sinusoid")

    G = section.get("G")
    if G is None:
        G = observer_sampled.estimate_lipschitz(model, cert, spec,
                                                n_samples=int(section.get("g_samples", 20000)),
                                                seed=seed)
    sigma = float(section.get("sigma", 0.01))
    r_cert, gamma = observer_sampled.select_sampling_diameter(
        G, spec.P_norm, cert.c, gains.mu, sigma)
    amp = float(section.get("noise_amplitude", 0.0))
    cfg_s = observer_sampled.SampledConfig(
        r=float(section.get("r", 0.1)), G=G, gamma_iss=gamma, sigma=sigma,
        c=cert.c, mu=gains.mu, P_norm=spec.P_norm,
        error_model=observer_sampled.uniform_noise(amp, seed) if amp > 0.0
        else observer_sampled.zero_error)
    traj, report = observer_sampled.run_sampled(
        model, cert, spec, cfg_s, x0, xi0, w0, float(cfg["horizon"]), u_sig,
        ctrl=_ctrl(cfg, 0.02))
    report.seed = seed
    report.notes.append(f"certified diameter at these constants: {r_cert:.3e}")
    write_trajectory_csv(out / "trajectory.csv", traj,
                         ["x1", "x2", "xi1", "xi2", "w"], event_flag=True)

    def err(states):
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            return float(np.linalg.norm(states[2:4] - states[:2]))
        return np.linalg.norm(states[:, 2:4] - states[:, :2], axis=1)

    write_log_error_csv(out / "plot_data.csv", traj, err)
    report.write_json(out / "report.json")
    return 0


def _run_openset(cfg, out: Path) -> int:
    params = _chemostat_params(cfg)
    section = cfg.get("openset", {})
    model = chemostat_model(params)
    X0 = _require(cfg, "initial", "X0")
    Z0 = _require(cfg, "initial", "Z0")
    clip = np.array([[params.theta, 1e6], [params.theta, 1e6]])
    u_sig = _build_input(cfg, clip, "constant", value=[0.1, 2.0])
    k = observer_openset.chemostat_candidate_k(params)
    which = section.get("observer", "corrected")
    try:
        if which == "corrected":
            chart, _ = observer_openset.chemostat_chart(
                params, eps=float(section.get("eps", 0.5)),
                a=float(section.get("a", 8.0)))
            traj, report = observer_openset.run_openset(
                model, chart, k, X0, Z0, float(cfg["horizon"]), u_sig,
                ctrl=_ctrl(cfg, 0.01, mode="adaptive", abs_tol=1e-6,
                           rel_tol=1e-6, max_step=0.1))
            names = ["X1", "X2", "Z1", "Z2", "x1", "x2", "z1", "z2", "lam"]
            rows = _openset_rows(traj, chart, model, u_sig)
            from .reports import write_csv
            write_csv(out / "trajectory.csv", ["t"] + names, rows)
        elif which == "candidate":
            traj, report = observer_openset.run_candidate(
                model, k, X0, Z0, float(cfg["horizon"]), u_sig,
                ctrl=_ctrl(cfg, 0.005))
            write_trajectory_csv(out / "trajectory.csv", traj,
                                 ["X1", "X2", "Z1", "Z2"])
        else:
            raise ConfigError(f"{cfg['_path']}: 'openset.observer' must be "
                              "'corrected' or 'candidate'")
    except DomainViolation as exc:
        print(f"domain violation: {exc}", file=sys.stderr)
        return 3
    report.seed = int(cfg["seed"])

    n = model.n

    def err(states):
        states = np.asarray(states, dtype=float)
        if which == "corrected":
            if states.ndim == 1:
                return float(np.linalg.norm(np.exp(states[n:]) - np.exp(states[:n])))
            return np.linalg.norm(np.exp(states[:, n:]) - np.exp(states[:, :n]), axis=1)
        if states.ndim == 1:
            return float(np.linalg.norm(states[n:] - states[:n]))
        return np.linalg.norm(states[:, n:] - states[:, :n], axis=1)

    write_log_error_csv(out / "plot_data.csv", traj, err)
    report.write_json(out / "report.json")
    return 0


def _openset_rows(traj, chart, model, u_sig):
    ktilde = chart.ktilde
    for t, s in zip(traj.times, traj.states):
        x, z = s[:2], s[2:]
        X, Z = chart.phi(x), chart.phi(z)
        y = float(model.h(X))
        u = u_sig(t)
        lam = observer_openset.correction_gain(chart, z, y, u, ktilde(z, y, u))
        yield [t, X[0], X[1], Z[0], Z[1], x[0], x[1], z[0], z[1], lam]


def _run_certify(cfg, out: Path) -> int:
    section = cfg.get("certify", {})
    ident = section.get("id")
    if ident is None:
        raise ConfigError(f"{cfg['_path']}: field 'certify.id' is required")
    n_samples = int(section.get("n_samples", 100_000))
    slack_tol = float(section.get("slack_tol", 1e-9))
    seed = int(cfg["seed"])

    if ident in ("H1", "H2", "H3_sufficient"):
        model, cert, spec, gains = _planar_setup(cfg)
        if section.get("flip_gain_sign", False):
            flipped = np.array([-gains.L1, -gains.L2])
            spec.k = lambda xi, y, u: flipped * (xi[0] - y)
        problem = observer_compact.planar_problem(model, cert, spec)
        ineq = {"H1": observer_compact.planar_h1_spec,
                "H2": observer_compact.planar_h2_spec,
                "H3_sufficient": observer_compact.planar_h3_spec}[ident](cert)
    elif ident == "P1":
        ineq, problem = observer_openset.chemostat_candidate_problem(
            _chemostat_params(cfg))
    elif ident == "OPEN_SET_39":
        ineq, problem = observer_openset.chemostat_openset_problem(
            _chemostat_params(cfg))
    else:
        raise ConfigError(f"{cfg['_path']}: unknown 'certify.id' {ident!r}")

    report = lyapunov.certify(ineq, problem, n_samples, slack_tol=slack_tol,
                              seed=seed)
    payload = report.to_json_dict()
    payload["seed"] = seed
    payload["kind"] = "certify"
    (out / "report.json").write_text(report_json(payload), encoding="utf-8")
    print(f"{ident}: {'passed' if report.passed else 'FAILED'} "
          f"({report.samples_tested} samples, worst margin "
          f"{report.worst_margin:.3e})")
    return 0 if report.passed else 2


def run_scenario(path, seed=None, out_dir=None, dt=None) -> int:
    """Execute one scenario file; returns the process exit code."""
    cfg = load_scenario(path)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    if dt is not None:
        cfg["dt"] = float(dt)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    kind = cfg["kind"]
    if kind == "continuous_compact":
        return _run_continuous(cfg, out)
    if kind == "sampled":
        return _run_sampled(cfg, out)
    if kind == "openset":
        return _run_openset(cfg, out)
    return _run_certify(cfg, out)


def _thread_cap() -> int:
    raw = os.environ.get("OBSX_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return max(1, os.cpu_count() or 1)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="obsx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one or more scenario files")
    run_p.add_argument("configs", nargs="+")
    cert_p = sub.add_parser("certify", help="run certification scenarios")
    cert_p.add_argument("configs", nargs="+")
    for p in (run_p, cert_p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--dt", type=float, default=None)

    cmp_p = sub.add_parser("compare", help="tabulate two or more report files")
    cmp_p.add_argument("reports", nargs="+")

    args = parser.parse_args(argv)

    if args.command == "compare":
        try:
            print(compare_runs(args.reports), end="")
        except SchemaMismatch as exc:
            print(f"schema mismatch: {exc}", file=sys.stderr)
            return 1
        return 0

    configs = list(args.configs)
    if args.command == "certify":
        for c in configs:
            if load_scenario(c)["kind"] != "certify":
                print(f"{c}: not a certify scenario", file=sys.stderr)
                return 1

    try:
        if len(configs) == 1:
            return run_scenario(configs[0], seed=args.seed,
                                out_dir=args.out_dir, dt=args.dt)
        codes = []
        with concurrent.futures.ThreadPoolExecutor(max_workers=_thread_cap()) as pool:
            futs = [pool.submit(run_scenario, c, args.seed, None, args.dt)
                    for c in configs]
            for fut in futs:
                codes.append(fut.result())
        return max(codes)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DomainViolation as exc:
        print(f"domain violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
