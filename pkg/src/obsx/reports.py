"""Run reports and deterministic artifact writers.

CSV output is byte-stable for a fixed config and seed: header row, floats at
17 significant digits, comma separators, LF line endings.  Reports serialize
to JSON with sorted keys and ``None`` fields dropped.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class SchemaMismatch(ValueError):
    """Report files do not share the fields a comparison needs."""


@dataclass
class RunReport:
    """Scalar summary of one run or certification scenario.

    ``m_hat`` is the empirical prefactor max over t of error(t) * exp(rate*t);
    ``tail_sup_error`` and the schedule statistics are filled by sampled-data
    runs, the positivity and growth-envelope fields by open-set runs.
    """

    kind: str = ""
    system: str = ""
    seed: int | None = None
    horizon: float | None = None
    initial_error: float | None = None
    terminal_error: float | None = None
    error_ratio: float | None = None
    fitted_rate: float | None = None
    r_squared: float | None = None
    m_hat: float | None = None
    entry_time_plant: float | None = None
    entry_time_observer: float | None = None
    tail_sup_error: float | None = None
    event_count: int | None = None
    max_interval: float | None = None
    schedule_clamped: bool | None = None
    sampling_diameter: float | None = None
    lipschitz_G: float | None = None
    gamma_iss: float | None = None
    diameter_certified: bool | None = None
    positivity_margin: float | None = None
    positivity_violated: bool | None = None
    growth_envelope_ok: bool | None = None
    growth_envelope_gap: float | None = None
    gains: dict | None = None
    certification: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {}
        for key, value in asdict(self).items():
            if value is None or (isinstance(value, (list, dict)) and not value):
                continue
            out[key] = value
        return out

    def write_json(self, path) -> None:
        Path(path).write_text(report_json(self.to_dict()), encoding="utf-8")


def report_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def load_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaMismatch(f"cannot read report {path}: {exc}")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(path, header, rows) -> None:
    """17-significant-digit CSV with LF endings (byte-stable per seed)."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_trajectory_csv(path, traj, state_names, event_flag: bool = False) -> None:
    """Trajectory CSV with one column per named state component.

    With ``event_flag``, an ``is_event`` column marks rows whose timestamp is
    a jump instant.
    """
    header = ["t"] + list(state_names)
    if event_flag:
        header.append("is_event")
        ev_times = {t for t, _tag in traj.events}
        rows = (
            [t] + list(s) + [1.0 if t in ev_times else 0.0]
            for t, s in zip(traj.times, traj.states)
        )
    else:
        rows = ([t] + list(s) for t, s in zip(traj.times, traj.states))
    write_csv(path, header, rows)


def write_log_error_csv(path, traj, error_norm) -> None:
    """Plot-ready CSV of (t, log error); rows with zero error are skipped."""
    errs = np.asarray(error_norm(traj.states), dtype=float)
    keep = errs > 0.0
    rows = ([t, np.log(e)] for t, e in zip(traj.times[keep], errs[keep]))
    write_csv(path, ["t", "log_error"], rows)


def compare_runs(report_paths) -> str:
    """Markdown table of decay rates, tail errors, event counts and positivity
    flags across at least two report files."""
    if len(report_paths) < 2:
        raise SchemaMismatch("need at least two reports to compare")
    reports = [(str(p), load_report(p)) for p in report_paths]
    for name, rep in reports:
        if "kind" not in rep:
            raise SchemaMismatch(f"report {name} has no 'kind' field")

    cols = ["report", "kind", "fitted_rate", "r_squared", "terminal_error",
            "tail_sup_error", "event_count", "positivity_violated"]
    lines = ["| " + " | ".join(cols) + " |",
             "|" + "|".join([" --- "] * len(cols)) + "|"]
    for name, rep in reports:
        cells = [Path(name).name, str(rep.get("kind", ""))]
        for key in cols[2:]:
            value = rep.get(key)
            if value is None:
                cells.append("")
            elif isinstance(value, bool):
                cells.append("yes" if value else "no")
            elif isinstance(value, float):
                cells.append(f"{value:.6g}")
            else:
                cells.append(str(value))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
