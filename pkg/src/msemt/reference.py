"""Brute-force benchmark solver and trajectory comparison metrics.

The RK4 reference integrates exactly the same compiled right-hand side the
micro-solver's coefficient recursion produces at first order, so any
disagreement between the two is method error, never model drift.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _core, _system
from .equilibrium import Equilibrium, initialize
from .hmm_engine import EventSchedule, HmmConfig, SimulationResult, _apply_events
from .model import PowerSystemCase, build_layout

__all__ = ["DivergenceError", "ErrorReport", "rk4_simulate", "rk4_step",
           "integral_error", "max_normalized_error", "speedup_report"]


class DivergenceError(RuntimeError):
    def __init__(self, t, message):
        super().__init__(f"t={t:.6f}: {message}")
        self.t = t


def rk4_step(f, x, t: float, h: float) -> np.ndarray:
    """One classical RK4 step of dx/dt = f(x, t); used by the unit oracles."""
    k1 = f(x, t)
    k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = f(x + h * k3, t + h)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_simulate(case: PowerSystemCase, schedule: EventSchedule | None = None,
                 h_fixed: float = 5.0e-6, t_end: float = 1.0,
                 record_dt: float | None = None,
                 equilibrium: Equilibrium | None = None) -> SimulationResult:
    """Fixed-step RK4 of the full model with events landing on step boundaries.

    record_dt subsamples the stored trajectory (None records every step);
    the integrator itself always runs at h_fixed.
    """
    if schedule is None:
        schedule = EventSchedule()
    layout = build_layout(case)
    eq = equilibrium if equilibrium is not None else initialize(case, layout)
    packed = eq.packed
    x = eq.x0.copy()
    t = 0.0
    rec_every = 1 if record_dt is None else max(1, int(round(record_dt / h_fixed)))

    n_cap = int(math.ceil(t_end / (h_fixed * rec_every))) + len(schedule.events) + 16
    rec_t = np.empty(n_cap)
    rec_x = np.empty((n_cap, layout.dim))
    rec_t[0] = 0.0
    rec_x[0] = x
    count = 1
    event_log = []
    events = list(schedule.events)
    ev_idx = 0
    wall0 = time.perf_counter()
    calls = 0

    while t < t_end - 1e-12:
        t_stop = min(events[ev_idx][0] if ev_idx < len(events) else math.inf, t_end)
        if t_stop > t + 1e-15:
            x, nrec, c, dv = _core.rk4_span(x, t, t_stop, h_fixed,
                                            *packed.kernel_args(),
                                            rec_every, rec_t, rec_x, count)
            calls += c
            count += nrec
            if dv:
                raise DivergenceError(rec_t[count - 1] if count else t,
                                      "reference integration diverged")
            t = t_stop
        batch = []
        while ev_idx < len(events) and events[ev_idx][0] <= t + 1e-12:
            batch.append(events[ev_idx][1])
            ev_idx += 1
        if batch:
            packed, x = _apply_events(packed, x, batch, event_log, t)

    counters = {"wall_total": time.perf_counter() - wall0, "rhs_calls": calls,
                "micro_steps": calls // 4, "n_windows": 0, "n_macro_steps": 0,
                "wall_micro": time.perf_counter() - wall0, "wall_kernel": 0.0,
                "wall_macro": 0.0}
    return SimulationResult(case=case, layout=layout, mode="rk4",
                            config=HmmConfig(t_end=t_end),
                            times=rec_t[:count].copy(),
                            states=rec_x[:count].copy(),
                            tags=np.zeros(count, dtype=np.uint8),
                            mh_times=np.empty(0), mh_values=np.empty(0),
                            counters=counters, event_log=event_log)


@dataclass(eq=False)
class ErrorReport:
    integral: float
    integral_by_family: dict
    max_normalized: float
    per_window_max: list
    wall_candidate: float
    wall_reference: float

    @property
    def speedup(self) -> float:
        return self.wall_reference / self.wall_candidate if self.wall_candidate else math.inf


def _family_of(name: str) -> str:
    if ".v_" in name:
        return "bus voltages"
    if ".w_" in name:
        return "branch currents"
    if ".i_" in name:
        return "source currents"
    return "device internals"


def _reference_values_at(reference: SimulationResult, ts: np.ndarray) -> np.ndarray:
    out = np.empty((len(ts), reference.states.shape[1]))
    for j, col in enumerate(reference.states.T):
        out[:, j] = np.interp(ts, reference.times, col)
    return out


def integral_error(candidate: SimulationResult, reference: SimulationResult,
                   t_total: float | None = None,
                   exclude: tuple[str, ...] = ()) -> float:
    """Time-averaged integral of the max-norm trajectory difference.

    Comparison points are the candidate's micro-resolution samples; when the
    candidate stored its step series these are evaluated exactly at the
    reference timestamps inside each micro span instead, which removes every
    interpolation artifact on the candidate side.
    """
    keep = np.array([nm not in exclude for nm in candidate.layout.names])
    t_total = t_total if t_total is not None else float(candidate.times[-1])
    mask = candidate.micro_mask()
    tc = candidate.times[mask]
    if len(tc) < 2:
        raise ValueError("no overlapping micro-resolution span to compare")

    if candidate.series_store:
        ref_t = reference.times
        acc = 0.0
        for t0, h, table in candidate.series_store:
            lo = np.searchsorted(ref_t, t0 - 1e-15)
            hi = np.searchsorted(ref_t, t0 + h + 1e-15)
            if hi <= lo:
                continue
            ts = ref_t[lo:hi]
            vals = np.empty((len(ts), table.shape[1]))
            for j, tt in enumerate(ts):
                vals[j] = _core.eval_series(table, tt - t0)
            diff = np.max(np.abs((vals - reference.states[lo:hi])[:, keep]), axis=1)
            acc += np.trapezoid(diff, ts) if len(ts) > 1 else 0.0
        return float(acc / t_total)

    xc = candidate.states[mask]
    xr = _reference_values_at(reference, tc)
    diff = np.max(np.abs((xc - xr)[:, keep]), axis=1)
    dt = np.diff(tc)
    # integrate only within contiguous micro spans; a jump larger than the
    # window length marks a macro gap
    contig = dt <= candidate.config.eta + 1e-9
    acc = np.sum(0.5 * (diff[1:] + diff[:-1]) * dt * contig)
    return float(acc / t_total)


def max_normalized_error(candidate: SimulationResult, reference: SimulationResult,
                         exclude: tuple[str, ...] = ()) -> float:
    """max |x_cand - x_ref| / (|x_ref| + 1) over all micro samples and states."""
    keep = np.array([nm not in exclude for nm in candidate.layout.names])
    mask = candidate.micro_mask()
    tc = candidate.times[mask]
    if candidate.series_store:
        worst = 0.0
        ref_t = reference.times
        for t0, h, table in candidate.series_store:
            lo = np.searchsorted(ref_t, t0 - 1e-15)
            hi = np.searchsorted(ref_t, t0 + h + 1e-15)
            if hi <= lo:
                continue
            for j in range(lo, hi):
                vals = _core.eval_series(table, ref_t[j] - t0)
                e = np.abs(vals - reference.states[j]) / (np.abs(reference.states[j]) + 1.0)
                worst = max(worst, float(np.max(e[keep])))
        return worst
    xc = candidate.states[mask]
    xr = _reference_values_at(reference, tc)
    e = np.abs(xc - xr) / (np.abs(xr) + 1.0)
    return float(np.max(e[:, keep]))


def error_report(candidate: SimulationResult, reference: SimulationResult,
                 exclude: tuple[str, ...] = ()) -> ErrorReport:
    families = {}
    names = candidate.layout.names
    for fam in ("bus voltages", "branch currents", "source currents", "device internals"):
        drop = tuple(nm for nm in names if _family_of(nm) != fam) + tuple(exclude)
        try:
            families[fam] = integral_error(candidate, reference, exclude=drop)
        except ValueError:
            families[fam] = math.nan
    per_window = []
    mask = candidate.micro_mask()
    tc = candidate.times[mask]
    xr = _reference_values_at(reference, tc)
    keep = np.array([nm not in exclude for nm in names])
    diff = np.max(np.abs((candidate.states[mask] - xr)[:, keep]), axis=1)
    for f in candidate.forces:
        sel = (tc >= f.t_assigned - candidate.config.eta) & (tc <= f.t_assigned)
        if np.any(sel):
            per_window.append((f.t_assigned, float(np.max(diff[sel]))))
    return ErrorReport(integral=integral_error(candidate, reference, exclude=exclude),
                       integral_by_family=families,
                       max_normalized=max_normalized_error(candidate, reference,
                                                           exclude=exclude),
                       per_window_max=per_window,
                       wall_candidate=candidate.counters.get("wall_total", math.nan),
                       wall_reference=reference.counters.get("wall_total", math.nan))


@dataclass(eq=False)
class SpeedupRow:
    label: str
    h_ratio: float         # H / eta
    wall: float
    speedup: float


def speedup_report(baseline_wall: float, runs: list) -> dict:
    """Measured speedups against the predicted H/eta scaling.

    runs is a list of (label, H_over_eta, wall_seconds).  Returns the rows
    plus slope and R^2 of the linear fit speedup ~ H/eta.
    """
    rows = [SpeedupRow(label=lb, h_ratio=r, wall=w, speedup=baseline_wall / w)
            for lb, r, w in runs]
    xs = np.array([r.h_ratio for r in rows])
    ys = np.array([r.speedup for r in rows])
    if len(rows) >= 2:
        slope, intercept = np.polyfit(xs, ys, 1)
        fit = slope * xs + intercept
        ss_res = float(np.sum((ys - fit) ** 2))
        ss_tot = float(np.sum((ys - np.mean(ys)) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    else:
        slope, intercept, r2 = math.nan, math.nan, math.nan
    return {"rows": rows, "slope": float(slope), "intercept": float(intercept),
            "r_squared": float(r2)}
