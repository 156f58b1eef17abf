"""Simulation orchestration: warmup, micro windows, kernel averaging, macro steps.

The run alternates between two regimes.  Inside forced micro spans (the
initial warmup, fault-on intervals, and a warmup-length tail after every
switching event) the micro-solver integrates continuously.  Elsewhere each
cycle runs one averaging window, estimates the macro-force by kernel
convolution of the compressed trajectory, and advances the macro state by a
single large step, either of fixed length H - eta or sized by the integral
controller r -> e -> rho -> Mh.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import _core, _system
from .dt_micro import MicroConfig, run_micro_span, run_micro_window
from .equilibrium import Equilibrium, angles_for, initialize, settle_metric
from .kernel import BumpKernel, estimate_macro_force
from .model import CaseError, PowerSystemCase, build_layout
from .network import TopologyEvent, apply_topology_event, assemble
from .transforms import compress, reconstruct

__all__ = [
    "HmmConfig",
    "EventSchedule",
    "load_schedule",
    "SimulationResult",
    "MacroDivergenceError",
    "initialize",
    "macro_step_fixed",
    "macro_step_variable",
    "run_simulation",
]

MODES = ("hmm-fixed", "hmm-variable", "micro-only")


class MacroDivergenceError(RuntimeError):
    def __init__(self, t, message, state=None):
        super().__init__(f"t={t:.6f}: {message}")
        self.t = t
        self.state = state


@dataclass(frozen=True)
class HmmConfig:
    """Run parameters; the defaults follow the two-area benchmark set."""

    t_end: float = 10.0
    # micro-process
    micro_mode: str = "fixed"      # "fixed" h or "defect" controlled
    h: float = 330.0e-6
    eps1: float = 1.0e-2
    order: int = 30
    eta: float = 0.0264
    h_min: float = 1.0e-6
    h_max: float | None = None     # None -> eta / 4
    # macro-process
    H: float | None = None         # fixed mode; None -> 2.625 * eta
    tol: float = 1.0e-2            # variable mode
    mh_max: float = 0.04
    rho_max: float = 1.05
    mh_init: float = 5.0e-3
    mh_min: float = 1.0e-4
    warmup: float = 1.0
    # kernel
    kernel_d: float = 1.25
    kernel_c: float | None = None
    n_grid: int = 129
    # switches
    use_averaged_state: bool = False
    identity_transforms: bool = False
    local_current_frames: bool = False
    store_series: bool | str = "auto"
    series_budget_mb: float = 64.0

    def micro_config(self, store_series: bool, inside_window: bool) -> MicroConfig:
        return MicroConfig(mode=self.micro_mode, h=self.h, eps1=self.eps1,
                           order=self.order, h_min=self.h_min,
                           h_max=self.h_max if (self.h_max is not None or inside_window)
                           else math.inf,
                           n_grid=self.n_grid, store_series=store_series)

    @property
    def h_fixed(self) -> float:
        return self.h

    @property
    def macro_H(self) -> float:
        return self.H if self.H is not None else 2.625 * self.eta


@dataclass(frozen=True, eq=False)
class EventSchedule:
    events: tuple[tuple[float, TopologyEvent], ...] = ()

    def __post_init__(self):
        times = [t for t, _ in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise CaseError("event times must be nondecreasing")
        open_faults = set()
        for _, ev in self.events:
            if ev.kind == "apply_fault":
                open_faults.add(ev.bus)
            elif ev.kind == "clear_fault":
                if ev.bus not in open_faults:
                    raise CaseError(f"clear_fault at bus {ev.bus} without a matching apply")
                open_faults.discard(ev.bus)

    def fault_intervals(self):
        out = []
        opened = {}
        for t, ev in self.events:
            if ev.kind == "apply_fault":
                opened[ev.bus] = t
            elif ev.kind == "clear_fault" and ev.bus in opened:
                out.append((opened.pop(ev.bus), t))
        for bus, t in opened.items():
            out.append((t, math.inf))
        return out


def load_schedule(path) -> EventSchedule:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    events = []
    for row in doc.get("events", []):
        kind = row["kind"]
        ev = TopologyEvent(kind=kind,
                           bus=row.get("bus"),
                           load=row.get("load"),
                           generator=row.get("generator"),
                           conductance=row.get("conductance"),
                           amplitude=float(row.get("amplitude", 0.0)),
                           frequency=float(row.get("frequency", 0.0)),
                           phase=str(row.get("phase", "a")))
        events.append((float(row["time"]), ev))
    events.sort(key=lambda p: p[0])
    return EventSchedule(events=tuple(events))


@dataclass(eq=False)
class SimulationResult:
    case: PowerSystemCase
    layout: object
    mode: str
    config: HmmConfig
    times: np.ndarray = None
    states: np.ndarray = None
    tags: np.ndarray = None          # 0 = micro sample, 1 = macro sample
    mh_times: np.ndarray = None
    mh_values: np.ndarray = None
    forces: list = field(default_factory=list)
    window_starts: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    event_log: list = field(default_factory=list)
    series_store: list | None = None
    averaged_state_gap: float = 0.0  # |averaged - raw| window-end diagnostic

    def state(self, name: str) -> np.ndarray:
        return self.states[:, self.layout.offset_of(name)]

    def micro_mask(self) -> np.ndarray:
        return self.tags == 0

    def evaluate_dense(self, ts: np.ndarray) -> np.ndarray:
        """Evaluate stored step series at arbitrary times inside micro spans."""
        if not self.series_store:
            raise ValueError("run was recorded without series storage")
        out = np.full((len(ts), self.layout.dim), np.nan)
        starts = np.array([s[0] for s in self.series_store])
        for j, t in enumerate(ts):
            i = np.searchsorted(starts, t, side="right") - 1
            if i < 0:
                continue
            t0, h, table = self.series_store[i]
            if t <= t0 + h + 1e-12:
                out[j] = _core.eval_series(table, t - t0)
        return out


class _Recorder:
    def __init__(self):
        self.times = []
        self.states = []
        self.tags = []
        self.mh = []
        self.series = []

    def extend_span(self, rec, keep_series):
        self.times.extend(rec.times)
        self.states.extend(rec.states)
        self.tags.extend([0] * len(rec.times))
        if keep_series:
            self.series.extend(rec.series)

    def add_macro(self, t, x):
        self.times.append(t)
        self.states.append(x.copy())
        self.tags.append(1)


# ---------------------------------------------------------------------------
# macro-step operations

def macro_step_fixed(u_end, f_n, H: float, eta: float, refine, slow_dim: int,
                     t_end: float):
    """Forward-Euler predictor over H - eta with a two-stage refinement of
    the slow vector field; returns (u_next, f_bar)."""
    return _macro_update(np.asarray(u_end, float), np.asarray(f_n, float),
                         H - eta, refine, slow_dim, t_end)


def _macro_update(u_end, f_n, mh, refine, slow_dim, t_end):
    u_pred = u_end + mh * f_n
    if not np.all(np.isfinite(u_pred)):
        raise MacroDivergenceError(t_end, "non-finite macro prediction", u_end)
    f_bar = f_n.copy()
    if refine is not None and mh > 0.0:
        # evaluate the slow-field refinement with the fast block held at the
        # window-end envelope: advancing it by the estimated force feeds any
        # band leakage of the estimate through the stiff slow-field
        # sensitivities and measurably destabilises large macro steps
        u_ref = u_end.copy()
        u_ref[:slow_dim] = u_pred[:slow_dim]
        f_next = refine(u_ref, t_end + mh)
        f_bar[:slow_dim] = 0.5 * (f_n[:slow_dim] + f_next[:slow_dim])
    u_next = u_end + mh * f_bar
    if not np.all(np.isfinite(u_next)):
        raise MacroDivergenceError(t_end, "non-finite macro update", u_end)
    return u_next, f_bar


def macro_step_variable(u_end, f_n, mh_n: float, tol: float,
                        rho_max: float = 1.05, mh_max: float = 0.04,
                        mh_min: float = 1.0e-4, refine=None, slow_dim: int = 0,
                        t_end: float = 0.0):
    """One controlled macro step.

    The zeroth-order error r = max |Mh f| / (|u|+1) maps to the truncation
    estimate e = r/(1-r); the growth factor rho = min(Tol/e, rho_max) sizes
    the next step, capped at mh_max.  Steps with r >= 1 (e singular) or
    e > 10 Tol are rejected and retried at half the step, a guard the plain
    controller formulas need to stay finite.

    Returns (u_next, mh_used, mh_next, diag).
    """
    u_end = np.asarray(u_end, float)
    f_n = np.asarray(f_n, float)

    def _r(mh):
        return float(np.max(np.abs(mh * f_n) / (np.abs(u_end) + 1.0)))

    mh = float(mh_n)
    r = _r(mh)
    rejected = 0
    while (r >= 1.0 or r / (1.0 - r) > 10.0 * tol) and mh > mh_min:
        mh = max(0.5 * mh, mh_min)
        r = _r(mh)
        rejected += 1
    e_n = r / (1.0 - r) if r < 1.0 else math.inf
    rho = rho_max if e_n == 0.0 else min(tol / e_n, rho_max)
    mh_next = min(rho * mh, mh_max)
    mh_next = max(mh_next, mh_min)
    u_next, f_bar = _macro_update(u_end, f_n, mh, refine, slow_dim, t_end)
    diag = {"r": r, "e": e_n, "rho": rho, "rejected": rejected}
    return u_next, mh, mh_next, diag


# ---------------------------------------------------------------------------
# event machinery

def _forced_micro_spans(schedule: EventSchedule, warmup: float, t_end: float):
    spans = [(0.0, min(warmup, t_end))]
    faults = schedule.fault_intervals()
    fault_starts = {a for a, _ in faults}
    for a, b in faults:
        spans.append((a, min(b + warmup, t_end) if math.isfinite(b) else t_end))
    for t, ev in schedule.events:
        if ev.kind == "apply_fault" and ev.bus is not None and t in fault_starts:
            continue
        spans.append((t, min(t + warmup, t_end)))
    spans.sort()
    merged = []
    for a, b in spans:
        if merged and a <= merged[-1][1] + 1e-12:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    return merged


def _apply_events(packed, x, events, recorder, t):
    layout = packed.layout
    matrices = packed.matrices
    notes = []
    for ev in events:
        matrices = apply_topology_event(matrices, ev)
        if ev.kind == "trip_generator":
            for k, g in enumerate(packed.case.generators):
                if g.id == ev.generator:
                    x[layout.src_i_slice(k)] = 0.0
        if ev.kind == "disconnect_load":
            rl_ids = [ld.id for ld in packed.case.loads if ld.kind == "RL"]
            if ev.load in rl_ids:
                e = len(packed.case.lines) + rl_ids.index(ev.load)
                x[layout.w_offset + 3 * e: layout.w_offset + 3 * e + 3] = 0.0
        notes.append(f"{ev.kind}"
                     + (f" bus={ev.bus}" if ev.bus is not None else "")
                     + (f" load={ev.load}" if ev.load is not None else "")
                     + (f" generator={ev.generator}" if ev.generator is not None else ""))
    packed = packed.with_matrices(matrices)
    for note in notes:
        recorder_entry = (t, note)
        recorder.append(recorder_entry)
    return packed, x


# ---------------------------------------------------------------------------
# the run loop

def _auto_store(config: HmmConfig, dim: int) -> bool:
    if isinstance(config.store_series, bool):
        return config.store_series
    approx_steps = config.t_end / config.h
    mb = approx_steps * dim * (config.order + 1) * 8.0 / 1e6
    return mb <= config.series_budget_mb


def run_simulation(case: PowerSystemCase, schedule: EventSchedule | None = None,
                   config: HmmConfig = HmmConfig(), mode: str = "hmm-variable",
                   equilibrium: Equilibrium | None = None) -> SimulationResult:
    """Simulate the case under the event schedule in the requested mode.

    micro-only integrates the full model throughout; the hmm modes alternate
    micro windows with macro jumps outside forced micro spans.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if schedule is None:
        schedule = EventSchedule()
    layout = build_layout(case)
    eq = equilibrium if equilibrium is not None else initialize(case, layout)
    packed = eq.packed
    x = eq.x0.copy()
    t = 0.0
    t_end = config.t_end
    store = _auto_store(config, layout.dim)

    kern = BumpKernel.for_window(config.eta, d=config.kernel_d, c=config.kernel_c,
                                 n_grid=config.n_grid)
    rec = _Recorder()
    rec.times.append(0.0)
    rec.states.append(x.copy())
    rec.tags.append(0)
    event_log = []
    forces = []
    window_starts = []
    mh_trace = []
    counters = {"wall_micro": 0.0, "wall_kernel": 0.0, "wall_macro": 0.0,
                "micro_steps": 0, "n_windows": 0, "n_macro_steps": 0,
                "rejected_macro_steps": 0}
    wall0 = time.perf_counter()

    events = list(schedule.events)
    ev_idx = 0
    spans = _forced_micro_spans(schedule, config.warmup, t_end) \
        if mode != "micro-only" else [(0.0, t_end)]
    mh_ctrl = config.mh_init
    avg_gap = 0.0

    def angles_at(xv, tv):
        return angles_for(packed, xv, tv, identity=config.identity_transforms,
                          local_frames=config.local_current_frames)

    def next_event_time():
        return events[ev_idx][0] if ev_idx < len(events) else math.inf

    def fire_events():
        nonlocal packed, x, ev_idx
        while ev_idx < len(events) and events[ev_idx][0] <= t + 1e-12:
            batch = []
            te = events[ev_idx][0]
            while ev_idx < len(events) and events[ev_idx][0] <= te + 1e-12:
                batch.append(events[ev_idx][1])
                ev_idx += 1
            packed, x = _apply_events(packed, x, batch, event_log, te)

    def in_forced_span(tv):
        for a, b in spans:
            if a - 1e-12 <= tv < b - 1e-12:
                return b
        return None

    fire_events()
    refine_calls = {"n": 0}

    def refine(u_pred, t_next):
        refine_calls["n"] += 1
        x_pred = reconstruct(u_pred, layout, angles_at(u_pred, t_next))
        return _system.full_rhs(packed, x_pred, t_next)

    while t < t_end - 1e-12:
        t_ev = next_event_time()
        span_end = in_forced_span(t)
        if span_end is not None or mode == "micro-only":
            t_stop = min(span_end if span_end is not None else t_end, t_ev, t_end)
            w0 = time.perf_counter()
            span = run_micro_span(packed, x, t, t_stop,
                                  config.micro_config(store, inside_window=False),
                                  record_first=False)
            counters["wall_micro"] += time.perf_counter() - w0
            counters["micro_steps"] += span.n_steps
            rec.extend_span(span, store)
            x = span.x_end
            t = t_stop
            mh_ctrl = config.mh_init   # controller restarts after a disturbance
            fire_events()
            continue
        if t_ev <= t + config.eta + 1e-12:
            t_stop = min(t_ev, t_end)
            w0 = time.perf_counter()
            span = run_micro_span(packed, x, t, t_stop,
                                  config.micro_config(store, inside_window=False),
                                  record_first=False)
            counters["wall_micro"] += time.perf_counter() - w0
            counters["micro_steps"] += span.n_steps
            rec.extend_span(span, store)
            x = span.x_end
            t = t_stop
            mh_ctrl = config.mh_init
            fire_events()
            continue
        if t + config.eta > t_end + 1e-12:
            # tail shorter than a window: finish at micro resolution
            w0 = time.perf_counter()
            span = run_micro_span(packed, x, t, t_end,
                                  config.micro_config(store, inside_window=False),
                                  record_first=False)
            counters["wall_micro"] += time.perf_counter() - w0
            counters["micro_steps"] += span.n_steps
            rec.extend_span(span, store)
            x = span.x_end
            t = t_end
            break

        # ---- one HMM cycle
        window_starts.append((t, x.copy()))
        w0 = time.perf_counter()
        window = run_micro_window(packed, x, t, config.eta,
                                  config.micro_config(store, inside_window=True),
                                  angles_at=angles_at)
        counters["wall_micro"] += time.perf_counter() - w0
        counters["micro_steps"] += window.span.n_steps
        counters["n_windows"] += 1
        rec.extend_span(window.span, store)
        t_prime = window.t_end
        x_end = window.x_end

        w0 = time.perf_counter()
        force = estimate_macro_force(window.u_grid, kern, t,
                                     window_id=counters["n_windows"])
        counters["wall_kernel"] += time.perf_counter() - w0
        forces.append(force)

        u_end = compress(x_end, layout, angles_at(x_end, t_prime))
        # gap between the raw compressed end state and its kernel-averaged
        # variant; reported so the choice between the two stays observable
        _, wv = kern.quadrature_value(t)
        u_avg = wv @ window.u_grid
        gap = float(np.max(np.abs(u_avg[layout.slow_dim:] - u_end[layout.slow_dim:])))
        avg_gap = max(avg_gap, gap)
        if config.use_averaged_state:
            u_end = u_end.copy()
            u_end[layout.slow_dim:] = u_avg[layout.slow_dim:]
        f_n = force.values.copy()
        f_n[:layout.slow_dim] = window.f_slow_end[:layout.slow_dim]

        w0 = time.perf_counter()
        if mode == "hmm-fixed":
            mh_used = config.macro_H - config.eta
            mh_used = min(mh_used, t_ev - t_prime, t_end - t_prime)
            u_next, _ = _macro_update(u_end, f_n, mh_used, refine,
                                      layout.slow_dim, t_prime)
            mh_trace.append((t_prime, max(mh_used, 0.0)))
        else:
            u_next, mh_used_ctrl, mh_ctrl_next, diag = macro_step_variable(
                u_end, f_n, mh_ctrl, config.tol, rho_max=config.rho_max,
                mh_max=config.mh_max, mh_min=config.mh_min, refine=refine,
                slow_dim=layout.slow_dim, t_end=t_prime)
            counters["rejected_macro_steps"] += diag["rejected"]
            mh_trace.append((t_prime, mh_used_ctrl))
            trunc = min(mh_used_ctrl, t_ev - t_prime, t_end - t_prime)
            if trunc < mh_used_ctrl - 1e-15:
                u_next, _ = _macro_update(u_end, f_n, trunc, refine,
                                          layout.slow_dim, t_prime)
                mh_used = trunc
            else:
                mh_used = mh_used_ctrl
            mh_ctrl = mh_ctrl_next
        counters["wall_macro"] += time.perf_counter() - w0
        counters["n_macro_steps"] += 1

        t = t_prime + max(mh_used, 0.0)
        x = reconstruct(u_next, layout, angles_at(u_next, t))
        rec.add_macro(t, x)
        fire_events()

    counters["wall_total"] = time.perf_counter() - wall0
    counters["rhs_calls"] = packed.rhs_calls
    counters["series_calls"] = packed.series_calls
    counters["refine_calls"] = refine_calls["n"]

    return SimulationResult(
        case=case, layout=layout, mode=mode, config=config,
        times=np.asarray(rec.times), states=np.asarray(rec.states),
        tags=np.asarray(rec.tags, dtype=np.uint8),
        mh_times=np.asarray([p[0] for p in mh_trace]),
        mh_values=np.asarray([p[1] for p in mh_trace]),
        forces=forces, window_starts=window_starts, counters=counters,
        event_log=event_log, series_store=rec.series if store else None,
        averaged_state_gap=avg_gap)
