"""Semi-analytical micro-solver.

Power-series coefficient algebra (the classic recursion rules for sums,
Cauchy products, coupled sine/cosine pairs, reciprocals and square roots),
the system-level coefficient builder, and the defect-controlled variable
stepper that advances the micro-state across one averaging window.

The step-size law exploits that for the linear network block the residual of
the truncated series substituted back into the network equation is exactly
||A_eq Psi[L] + B_eq Lam[L]||_inf * h^L, so the step solving residual = eps1
is h = (eps1 / Q_L)^(1/L) in closed form.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _core, _system
from .transforms import ParkAngles, compress

__all__ = [
    "DtSeries",
    "MicroConfig",
    "MicroWindowResult",
    "SpanResult",
    "StiffFailureError",
    "dt_add",
    "dt_scale",
    "dt_product",
    "dt_sin",
    "dt_cos",
    "dt_sincos",
    "dt_reciprocal",
    "dt_sqrt",
    "dt_system_coefficients",
    "evaluate_series",
    "defect_error",
    "select_step",
    "run_micro_window",
    "run_micro_span",
]


class StiffFailureError(RuntimeError):
    """Step size collapsed to the floor repeatedly; the model is too stiff here."""

    def __init__(self, t, message, state=None):
        super().__init__(f"t={t:.9f}: {message}")
        self.t = t
        self.state = state


@dataclass(frozen=True, eq=False)
class DtSeries:
    """Taylor coefficients about t0: value(t0 + h) = sum_k coeffs[k] h^k.

    coeffs has shape (order+1,) for a scalar signal or (order+1, n) for a
    state table (one column per state).
    """

    t0: float
    coeffs: np.ndarray

    @property
    def order(self) -> int:
        return self.coeffs.shape[0] - 1

    def __post_init__(self):
        if self.coeffs.shape[0] < 2:
            raise ValueError("series order must be >= 1")
        if not np.all(np.isfinite(self.coeffs)):
            raise FloatingPointError("non-finite series coefficient")


def _check_compatible(a: DtSeries, b: DtSeries):
    if a.coeffs.shape != b.coeffs.shape:
        raise ValueError("series order mismatch")
    if a.t0 != b.t0:
        raise ValueError("series base time mismatch")


def dt_add(a: DtSeries, b: DtSeries) -> DtSeries:
    _check_compatible(a, b)
    return DtSeries(a.t0, a.coeffs + b.coeffs)


def dt_scale(a: DtSeries, factor: float) -> DtSeries:
    return DtSeries(a.t0, factor * a.coeffs)


def dt_product(a: DtSeries, b: DtSeries) -> DtSeries:
    """Cauchy product truncated to the common order."""
    _check_compatible(a, b)
    n = a.coeffs.shape[0]
    out = np.zeros_like(a.coeffs)
    for k in range(n):
        for j in range(k + 1):
            out[k] += a.coeffs[j] * b.coeffs[k - j]
    return DtSeries(a.t0, out)


def dt_sincos(angle: DtSeries) -> tuple[DtSeries, DtSeries]:
    """Coupled sine/cosine coefficient recursion for a series-valued angle."""
    th = angle.coeffs
    n = th.shape[0]
    s = np.zeros_like(th)
    c = np.zeros_like(th)
    s[0] = np.sin(th[0])
    c[0] = np.cos(th[0])
    for k in range(1, n):
        acc_s = 0.0 * th[0]
        acc_c = 0.0 * th[0]
        for j in range(1, k + 1):
            acc_s = acc_s + j * th[j] * c[k - j]
            acc_c = acc_c + j * th[j] * s[k - j]
        s[k] = acc_s / k
        c[k] = -acc_c / k
    return DtSeries(angle.t0, s), DtSeries(angle.t0, c)


def dt_sin(angle: DtSeries) -> DtSeries:
    return dt_sincos(angle)[0]


def dt_cos(angle: DtSeries) -> DtSeries:
    return dt_sincos(angle)[1]


def dt_reciprocal(a: DtSeries) -> DtSeries:
    """Coefficients of 1/a from the product identity a * (1/a) = 1."""
    c = a.coeffs
    if np.any(np.abs(np.atleast_1d(c[0])) < 1e-300):
        raise ZeroDivisionError("reciprocal of series with zero leading coefficient")
    out = np.zeros_like(c)
    out[0] = 1.0 / c[0]
    for k in range(1, c.shape[0]):
        acc = 0.0 * c[0]
        for j in range(1, k + 1):
            acc = acc + c[j] * out[k - j]
        out[k] = -acc / c[0]
    return DtSeries(a.t0, out)


def dt_sqrt(a: DtSeries) -> DtSeries:
    c = a.coeffs
    out = np.zeros_like(c)
    out[0] = np.sqrt(c[0])
    for k in range(1, c.shape[0]):
        acc = 0.0 * c[0]
        for j in range(1, k):
            acc = acc + out[j] * out[k - j]
        out[k] = (c[k] - acc) / (2.0 * out[0])
    return DtSeries(a.t0, out)


def dt_system_coefficients(packed: _system.PackedSystem, x0, t0: float,
                           order: int) -> tuple[DtSeries, np.ndarray]:
    """Full-system coefficient table plus the order-L network residual vector."""
    table, qvec = _system.series(packed, x0, t0, order)
    if not np.all(np.isfinite(table)):
        raise FloatingPointError(f"non-finite coefficient in system series at t={t0}")
    return DtSeries(t0, table), qvec


def evaluate_series(series: DtSeries | np.ndarray, h: float):
    """Evaluate the truncated series and its time derivative at offset h."""
    table = series.coeffs if isinstance(series, DtSeries) else np.asarray(series)
    if table.ndim == 1:
        table = table[:, None]
        val = _core.eval_series(np.ascontiguousarray(table), float(h))[0]
        der = _core.eval_series_deriv(np.ascontiguousarray(table), float(h))[0]
        return val, der
    value = _core.eval_series(np.ascontiguousarray(table), float(h))
    deriv = _core.eval_series_deriv(np.ascontiguousarray(table), float(h))
    return value, deriv


def defect_error(psi_l, lam_l, a_eq, b_eq, h: float, order: int) -> float:
    """Closed-form network defect of the truncated order-L series after a step h.

    psi_l and lam_l are the order-L coefficient rows; the residual the step
    leaves in the network equation is exactly ||A_eq psi_l + B_eq lam_l|| h^L.
    """
    b_eq = np.asarray(b_eq)
    resid = np.asarray(a_eq) @ np.asarray(psi_l)
    if b_eq.ndim == 1:
        resid = resid + b_eq * np.asarray(lam_l)
    else:
        resid = resid + b_eq @ np.asarray(lam_l)
    return float(np.max(np.abs(resid))) * float(h) ** order


@dataclass(frozen=True)
class MicroConfig:
    mode: str = "fixed"       # "fixed" step h, or "defect" controlled by eps1
    h: float = 330.0e-6
    eps1: float = 1.0e-2
    order: int = 30
    h_min: float = 1.0e-6
    h_max: float | None = None   # defaults to eta/4 inside windows
    n_grid: int = 129
    store_series: bool = False
    max_floor_hits: int = 200


def select_step(q_l: float, eps1: float, order: int,
                h_min: float = 1.0e-6, h_max: float = math.inf) -> float:
    """Solve the defect law Q_L h^L = eps1 for h, clamped to [h_min, h_max]."""
    if q_l < 0.0 or not math.isfinite(q_l):
        raise ValueError("coefficient norm must be finite and nonnegative")
    if q_l == 0.0:
        return h_max
    h = (eps1 / q_l) ** (1.0 / order)
    return min(max(h, h_min), h_max)


@dataclass(eq=False)
class SpanResult:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    defects: list = field(default_factory=list)
    series: list = field(default_factory=list)   # (t0, h, table) when stored
    rhs_end: np.ndarray | None = None
    x_end: np.ndarray | None = None
    t_end: float = 0.0
    n_steps: int = 0


@dataclass(eq=False)
class MicroWindowResult:
    t_start: float
    t_end: float
    x_end: np.ndarray
    f_slow_end: np.ndarray        # full rhs at the window end
    tau_grid: np.ndarray          # n_grid uniform samples spanning the window
    u_grid: np.ndarray            # compressed trajectory on tau_grid
    span: SpanResult

    @property
    def samples(self):
        return self.span.times, self.span.states

    @property
    def accepted_steps(self):
        return self.span.steps


def _advance(packed, x, t0, t1, cfg: MicroConfig, record: SpanResult,
             grid_tau=None, grid_out=None, grid_fill=None,
             record_first=True):
    """Shared stepping loop from t0 to t1 (exact landing on t1)."""
    h_cap = cfg.h_max if cfg.h_max is not None else math.inf
    t = t0
    if record_first:
        record.times.append(t)
        record.states.append(x.copy())
    floor_hits = 0
    gi = 0
    if grid_tau is not None:
        while gi < len(grid_tau) and grid_tau[gi] <= t0:
            grid_fill(gi, x, t0)
            gi += 1
    while t < t1 - 1e-15:
        series, qvec = dt_system_coefficients(packed, x, t, cfg.order)
        qnorm = _system.defect_norm(qvec)
        if cfg.mode == "fixed":
            h = min(cfg.h, h_cap)
            clamped = True
        else:
            h = select_step(qnorm, cfg.eps1, cfg.order, cfg.h_min, h_cap)
            clamped = h <= cfg.h_min * (1.0 + 1e-12) or h >= h_cap * (1.0 - 1e-12)
            if h <= cfg.h_min * (1.0 + 1e-12):
                floor_hits += 1
                if floor_hits > cfg.max_floor_hits:
                    raise StiffFailureError(
                        t, f"step floor {cfg.h_min:g}s hit {floor_hits} times in a row "
                           f"(residual norm {qnorm:.3e})", state=x.copy())
            else:
                floor_hits = 0
        truncated = False
        if t + h >= t1 - 1e-15:
            h = t1 - t
            truncated = True
        defect = qnorm * h ** cfg.order
        if cfg.mode == "defect" and not clamped and not truncated:
            assert defect <= cfg.eps1 * (1.0 + 1e-9)
        table = series.coeffs
        x = _core.eval_series(table, h)
        if grid_tau is not None:
            t_next = t1 if truncated else t + h
            while gi < len(grid_tau) and grid_tau[gi] <= t_next + 1e-15:
                grid_fill(gi, _core.eval_series(table, grid_tau[gi] - t), grid_tau[gi])
                gi += 1
        if cfg.store_series:
            record.series.append((t, h, table))
        t = t1 if truncated else t + h
        record.times.append(t)
        record.states.append(x.copy())
        record.steps.append(h)
        record.defects.append(defect)
        record.n_steps += 1
    record.x_end = x
    record.t_end = t
    return x


def run_micro_span(packed, x0, t0: float, t1: float, cfg: MicroConfig,
                   record_first=True) -> SpanResult:
    """Continuous micro-resolution integration over [t0, t1]."""
    rec = SpanResult()
    x = np.asarray(x0, dtype=float).copy()
    _advance(packed, x, t0, t1, cfg, rec, record_first=record_first)
    return rec


def run_micro_window(packed, x0, t_n: float, eta: float, cfg: MicroConfig,
                     angles_at=None) -> MicroWindowResult:
    """Micro-process over one averaging window [t_n, t_n + eta].

    Alongside the accepted steps this evaluates the stored step series on a
    uniform grid of cfg.n_grid points and compresses each sample, producing
    the macro-coordinate trajectory the kernel convolution consumes.
    """
    if eta <= 0.0:
        raise ValueError("window length must be positive")
    layout = packed.layout
    cfg_w = cfg if cfg.h_max is not None else \
        MicroConfig(**{**cfg.__dict__, "h_max": eta / 4.0})
    tau = np.linspace(t_n, t_n + eta, cfg.n_grid)
    u_grid = np.empty((cfg.n_grid, layout.dim))

    if angles_at is None:
        def angles_at(x, t):
            return ParkAngles(theta=0.0, rate=0.0, identity=True)

    def fill(idx, x, t):
        u_grid[idx] = compress(x, layout, angles_at(x, t))

    rec = SpanResult()
    x = np.asarray(x0, dtype=float).copy()
    x_end = _advance(packed, x, t_n, t_n + eta, cfg_w, rec,
                     grid_tau=tau, grid_out=u_grid, grid_fill=fill)
    f_end = _system.full_rhs(packed, x_end, t_n + eta)
    return MicroWindowResult(t_start=t_n, t_end=rec.t_end, x_end=x_end,
                             f_slow_end=f_end, tau_grid=tau, u_grid=u_grid,
                             span=rec)
