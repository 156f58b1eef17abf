"""Equilibrium construction: phasor pre-solve, state assembly, fixed-point polish.

The simulator needs a start state whose rotating-frame derivative vanishes.
A small positive-sequence phasor solve places the network near balance, the
device internals are then back-solved from their steady relations, and a
Newton polish on the rotating-frame fixed point pins the residual below the
settling tolerance.  The rotating-frame residual of state x is

    g(x) = [ f_slow(x) ;  P f_fast(x) + theta_dot W (P x_fast) ]

which is zero exactly when every dq-frame quantity and every device state is
stationary, the 60 Hz carrier excluded.  A damped pre-simulation (raised
machine damping) is used as a fallback when the polish does not converge
from the phasor start.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import fsolve

from . import _core, _system
from .dt_micro import MicroConfig, run_micro_span
from .model import PowerSystemCase, StateLayout, build_layout
from .network import NetworkMatrices, assemble
from .transforms import ParkAngles, dq_rate

__all__ = ["InitializationError", "Equilibrium", "settle_metric", "initialize"]

SETTLE_TOL = 1.0e-6
PHASE_SHIFTS = (0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0)


class InitializationError(RuntimeError):
    pass


@dataclass(eq=False)
class Equilibrium:
    x0: np.ndarray
    setpoints: _system.Setpoints
    packed: _system.PackedSystem
    residual: float
    worst_state: str


def _reference_offsets(case: PowerSystemCase, layout: StateLayout):
    for k, g in enumerate(case.generators):
        if g.id == case.reference_generator:
            return layout.gen_offsets[k], k
    raise InitializationError("initialisation needs at least one generator "
                              "to anchor the reference frame")


def angles_for(packed: _system.PackedSystem, x, t: float,
               identity: bool = False, local_frames: bool = False) -> ParkAngles:
    """Global-frame rotation angles at one instant, derived from the state."""
    if identity:
        return ParkAngles(theta=0.0, rate=0.0, identity=True)
    case, layout = packed.case, packed.layout
    off, _ = _reference_offsets(case, layout)
    theta = case.omega0 * t + x[off + _core.G_DELTA]
    rate = case.omega0 + x[off + _core.G_DOMEGA]
    per_source = None
    if local_frames:
        angs = []
        for k in range(len(case.generators)):
            o = layout.gen_offsets[k]
            angs.append(case.omega0 * t + x[o + _core.G_DELTA])
        for k in range(len(case.ibrs)):
            o = layout.ibr_offsets[k]
            angs.append(case.omega0 * t + x[o + _core.I_CHI])
        per_source = tuple(angs)
    return ParkAngles(theta=theta, rate=rate, per_source=per_source)


def settle_metric(packed: _system.PackedSystem, x, t: float = 0.0):
    """Max rotating-frame derivative and the name of the worst state."""
    layout = packed.layout
    f = _system.full_rhs(packed, x, t)
    ang = angles_for(packed, x, t)
    g = dq_rate(x, f, layout, ang)
    worst = int(np.argmax(np.abs(g)))
    return float(np.max(np.abs(g))), layout.names[worst]


# ---------------------------------------------------------------------------
# phasor pre-solve

def _phasor_solution(case: PowerSystemCase, matrices: NetworkMatrices):
    """Positive-sequence network solution with PV generators and PQ inverters.

    Returns complex bus voltages (peak pu) and source injection phasors in
    system pu.  Loads live inside the admittance matrix.
    """
    n = matrices.n_bus
    w0 = case.omega0
    g_bus = matrices.g_diag[::3]
    c_bus = matrices.c_diag[::3]
    y = np.diag(g_bus + 1j * w0 * c_bus).astype(complex)
    r_e = matrices.r_diag[::3]
    l_e = matrices.l_diag[::3]
    b_full = matrices.b3_full[::3, ::3]
    y_edge = 1.0 / (r_e + 1j * w0 * l_e)
    y += b_full @ np.diag(y_edge) @ b_full.T

    ng = len(case.generators)
    gen_bus = [case.bus_index(g.bus) for g in case.generators]
    ibr_bus = [case.bus_index(i.bus) for i in case.ibrs]
    p_gen = [g.p_set / case.base_mva for g in case.generators]
    v_gen = [g.v_set for g in case.generators]
    s_ibr = [(i.p_set + 1j * i.q_set) / case.base_mva for i in case.ibrs]
    slack = next(k for k, g in enumerate(case.generators)
                 if g.id == case.reference_generator)

    def resid(z):
        v = z[:n] + 1j * z[n:2 * n]
        ig = z[2 * n:2 * n + ng] + 1j * z[2 * n + ng:]
        inj = np.zeros(n, complex)
        for k in range(ng):
            inj[gen_bus[k]] += ig[k]
        for k, b in enumerate(ibr_bus):
            vb = v[b]
            if abs(vb) < 1e-6:
                vb = 1e-6
            inj[b] += np.conj(s_ibr[k] / vb)
        mism = y @ v - inj
        out = np.empty(2 * n + 2 * ng)
        out[:n] = mism.real
        out[n:2 * n] = mism.imag
        for k in range(ng):
            vb = v[gen_bus[k]]
            s = vb * np.conj(ig[k])
            if k == slack:
                out[2 * n + k] = vb.imag
            else:
                out[2 * n + k] = s.real - p_gen[k]
            out[2 * n + ng + k] = abs(vb) ** 2 - v_gen[k] ** 2
        return out

    z0 = np.zeros(2 * n + 2 * ng)
    z0[:n] = 1.0
    for k in range(ng):
        z0[2 * n + k] = p_gen[k]
    sol, info, ier, msg = fsolve(resid, z0, full_output=True, xtol=1e-13)
    if ier != 1 or np.max(np.abs(resid(sol))) > 1e-8:
        raise InitializationError(f"phasor pre-solve did not converge: {msg}")
    v = sol[:n] + 1j * sol[n:2 * n]
    ig = sol[2 * n:2 * n + ng] + 1j * sol[2 * n + ng:]
    i_src = list(ig)
    for k, b in enumerate(ibr_bus):
        i_src.append(np.conj(s_ibr[k] / v[b]))
    return v, np.array(i_src), y_edge


def _abc_at_zero(phasor: complex) -> np.ndarray:
    return np.array([(phasor * cmath.exp(1j * s)).real for s in PHASE_SHIFTS])


def _assemble_state(case: PowerSystemCase, layout: StateLayout,
                    matrices: NetworkMatrices, v, i_src, y_edge):
    """Back-solve all device internals from the phasor solution at t = 0."""
    x = np.zeros(layout.dim)
    pos = {b.id: k for k, b in enumerate(case.buses)}

    for k in range(matrices.n_bus):
        x[layout.v_offset + 3 * k: layout.v_offset + 3 * k + 3] = _abc_at_zero(v[k])
    e = 0
    for line in case.lines:
        lo, hi = sorted((line.from_bus, line.to_bus))
        iw = (v[pos[lo]] - v[pos[hi]]) * y_edge[e]
        x[layout.w_offset + 3 * e: layout.w_offset + 3 * e + 3] = _abc_at_zero(iw)
        e += 1
    for ld in case.loads:
        if ld.kind != "RL":
            continue
        iw = v[pos[ld.bus]] * y_edge[e]
        x[layout.w_offset + 3 * e: layout.w_offset + 3 * e + 3] = _abc_at_zero(iw)
        e += 1

    gen_p_ref, gen_v_ref = [], []
    for k, g in enumerate(case.generators):
        off = layout.gen_offsets[k]
        c = g.base_mva / case.base_mva
        vb = v[case.bus_index(g.bus)]
        im = i_src[k] / c
        x[layout.src_i_slice(k)] = _abc_at_zero(i_src[k])

        x_d = g.x_ls + g.x_md
        x_q = g.x_ls + g.x_mq
        eq = vb + (g.r_s + 1j * x_q) * im
        delta = cmath.phase(eq) - math.pi / 2.0
        vdq = vb * cmath.exp(-1j * delta)
        idq = im * cmath.exp(-1j * delta)
        vd, vq = vdq.real, vdq.imag
        idd, iq = idq.real, idq.imag
        ifd = (vq + g.r_s * iq + x_d * idd) / g.x_md
        lam_d = vq + g.r_s * iq
        lam_q = -(vd + g.r_s * idd)
        lam_ad = lam_d + g.x_ls * idd
        lam_aq = lam_q + g.x_ls * iq
        pe = lam_d * iq - lam_q * idd
        efd = g.x_md * ifd
        vt = abs(vb)

        x[off + _core.G_DELTA] = delta
        x[off + _core.G_DOMEGA] = 0.0
        x[off + _core.G_LFD] = lam_ad + g.x_lfd * ifd
        x[off + _core.G_L1D] = lam_ad
        x[off + _core.G_L1Q] = lam_aq
        x[off + _core.G_L2Q] = lam_aq
        x[off + _core.G_GV] = pe
        x[off + _core.G_GR] = pe
        x[off + _core.G_XLL] = efd / g.exciter.k
        x[off + _core.G_EFD] = efd
        x[off + _core.G_VM2] = vt * vt
        gen_p_ref.append(pe)
        gen_v_ref.append(vt + efd / g.exciter.k)

    ibr_p_ref, ibr_q_ref, ibr_v_ref = [], [], []
    for k, b in enumerate(case.ibrs):
        off = layout.ibr_offsets[k]
        c = b.base_mva / case.base_mva
        vb = v[case.bus_index(b.bus)]
        im = i_src[len(case.generators) + k] / c
        x[layout.src_i_slice(len(case.generators) + k)] = \
            _abc_at_zero(i_src[len(case.generators) + k])

        chi = cmath.phase(vb)
        itq = im * cmath.exp(-1j * chi)
        itd, itq_ = itq.real, itq.imag
        vtd = abs(vb)
        p0 = vtd * itd
        q0 = -vtd * itq_
        for nm in ("ki_pwr", "ki_cur", "ki_pll"):
            if getattr(b, nm) <= 0.0:
                raise InitializationError(
                    f"ibr {b.id}: {nm} must be positive to initialise at equilibrium")
        x[off + _core.I_CHI] = chi
        x[off + _core.I_PHI] = 0.0
        x[off + _core.I_XIP] = itd / b.ki_pwr
        x[off + _core.I_XIQ] = itq_ / b.ki_pwr
        x[off + _core.I_ZD] = b.r_f * itd / b.ki_cur
        x[off + _core.I_ZQ] = b.r_f * itq_ / b.ki_cur
        x[off + _core.I_PF] = p0
        x[off + _core.I_QF] = q0
        x[off + _core.I_VF] = vtd
        x[off + _core.I_WF] = case.omega0
        x[off + _core.I_FFD] = vtd
        x[off + _core.I_FFQ] = 0.0
        ibr_p_ref.append(p0)
        ibr_q_ref.append(q0)
        ibr_v_ref.append(vtd)

    sp = _system.Setpoints(gen_p_ref=tuple(gen_p_ref), gen_v_ref=tuple(gen_v_ref),
                           ibr_p_ref=tuple(ibr_p_ref), ibr_q_ref=tuple(ibr_q_ref),
                           ibr_v_ref=tuple(ibr_v_ref))
    return x, sp


def _polish(packed: _system.PackedSystem, x0, tol=SETTLE_TOL):
    """Newton solve of the rotating-frame fixed point.

    The absolute phase is a zero mode, so the reference machine angle is
    pinned and its power reference becomes the matching unknown (the slack).
    """
    case, layout = packed.case, packed.layout
    ref_off, ref_idx = _reference_offsets(case, layout)
    pin = ref_off + _core.G_DELTA
    n = layout.dim
    free = [i for i in range(n) if i != pin]
    delta_ref = x0[pin]

    gp = packed.gp

    def resid(z):
        x = np.empty(n)
        x[free] = z[:-1]
        x[pin] = delta_ref
        gp[ref_idx, _core.GP_PREF] = z[-1]
        f = _system.full_rhs(packed, x, 0.0)
        ang = angles_for(packed, x, 0.0)
        return dq_rate(x, f, layout, ang)

    z0 = np.empty(n)
    z0[:-1] = x0[free]
    z0[-1] = gp[ref_idx, _core.GP_PREF]
    sol, info, ier, msg = fsolve(resid, z0, full_output=True, xtol=1e-13)
    res = resid(sol)
    x = np.empty(n)
    x[free] = sol[:-1]
    x[pin] = delta_ref
    pref = sol[-1]
    gp[ref_idx, _core.GP_PREF] = pref
    return x, pref, float(np.max(np.abs(res)))


def initialize(case: PowerSystemCase, layout: StateLayout | None = None,
               matrices: NetworkMatrices | None = None,
               tol: float = SETTLE_TOL, presim: float = 0.0) -> Equilibrium:
    """Settled start state with self-consistent controller references.

    presim > 0 forces a damped pre-simulation of that many seconds between
    the phasor start and the polish; it also runs automatically as a fallback
    when the polish cannot reach the tolerance directly.
    """
    if layout is None:
        layout = build_layout(case)
    if matrices is None:
        matrices = assemble(case)
    if not case.generators:
        raise InitializationError("initialisation needs at least one generator")

    v, i_src, y_edge = _phasor_solution(case, matrices)
    x0, sp = _assemble_state(case, layout, matrices, v, i_src, y_edge)
    packed = _system.pack_system(case, layout, matrices, sp)

    if presim > 0.0:
        x0 = _damped_presim(packed, x0, presim)

    x, pref, res = _polish(packed, x0, tol)
    if res > tol:
        x1 = _damped_presim(packed, x0, 0.5)
        x, pref, res = _polish(packed, x1, tol)
    sp = replace(sp, gen_p_ref=tuple(
        pref if case.generators[k].id == case.reference_generator
        else sp.gen_p_ref[k] for k in range(len(case.generators))))
    packed = _system.pack_system(case, layout, matrices, sp)
    metric, worst = settle_metric(packed, x, 0.0)
    if metric > tol:
        raise InitializationError(
            f"equilibrium not reached: residual {metric:.3e} > {tol:g} "
            f"(worst state {worst})")
    return Equilibrium(x0=x, setpoints=sp, packed=packed, residual=metric,
                       worst_state=worst)


def _damped_presim(packed: _system.PackedSystem, x0, duration: float,
                   boost: float = 50.0):
    """Short micro-simulation with artificially raised machine damping."""
    gp_saved = packed.gp.copy()
    packed.gp[:, _core.GP_D] += boost
    try:
        cfg = MicroConfig(mode="defect", eps1=1e-3, order=30, h_max=2.0e-3)
        rec = run_micro_span(packed, x0, 0.0, duration, cfg)
        return rec.x_end
    finally:
        packed.gp[:, :] = gp_saved
