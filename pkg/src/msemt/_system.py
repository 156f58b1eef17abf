"""Packing of a validated case into the flat arrays the compiled kernels take."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _core
from .model import PowerSystemCase, StateLayout, build_layout
from .network import NetworkMatrices, assemble

__all__ = ["Setpoints", "PackedSystem", "default_setpoints", "pack_system",
           "series", "full_rhs", "defect_norm"]

PHASE_INDEX = {"a": 0, "b": 1, "c": 2}


@dataclass(frozen=True, eq=False)
class Setpoints:
    """Controller references, tuned at initialisation (device-base pu)."""

    gen_p_ref: tuple[float, ...]
    gen_v_ref: tuple[float, ...]
    ibr_p_ref: tuple[float, ...]
    ibr_q_ref: tuple[float, ...]
    ibr_v_ref: tuple[float, ...]


def default_setpoints(case: PowerSystemCase) -> Setpoints:
    return Setpoints(
        gen_p_ref=tuple(g.p_set / g.base_mva for g in case.generators),
        gen_v_ref=tuple(g.v_set for g in case.generators),
        ibr_p_ref=tuple(i.p_set / i.base_mva for i in case.ibrs),
        ibr_q_ref=tuple(i.q_set / i.base_mva for i in case.ibrs),
        ibr_v_ref=tuple(1.0 for _ in case.ibrs),
    )


@dataclass(eq=False)
class PackedSystem:
    case: PowerSystemCase
    layout: StateLayout
    matrices: NetworkMatrices
    setpoints: Setpoints
    omega0: float
    a_eq: np.ndarray
    beq_diag: np.ndarray
    gp: np.ndarray
    gen_bus: np.ndarray
    gen_off: np.ndarray
    gen_ioff: np.ndarray
    ip: np.ndarray
    ibr_bus: np.ndarray
    ibr_off: np.ndarray
    ibr_ioff: np.ndarray
    inj: np.ndarray
    rhs_calls: int = 0
    series_calls: int = 0

    @property
    def n(self) -> int:
        return self.layout.dim

    def kernel_args(self):
        lo = self.layout
        return (self.omega0, self.a_eq, self.beq_diag,
                self.gp, self.gen_bus, self.gen_off, self.gen_ioff,
                self.ip, self.ibr_bus, self.ibr_off, self.ibr_ioff,
                self.inj, lo.slow_dim, lo.v_offset, lo.i_offset)

    def with_matrices(self, matrices: NetworkMatrices) -> "PackedSystem":
        """Rebind the network operators after a topology event."""
        return _pack_from_parts(self.case, self.layout, matrices, self.setpoints)


def pack_system(case: PowerSystemCase, layout: StateLayout | None = None,
                matrices: NetworkMatrices | None = None,
                setpoints: Setpoints | None = None) -> PackedSystem:
    if layout is None:
        layout = build_layout(case)
    if matrices is None:
        matrices = assemble(case)
    if setpoints is None:
        setpoints = default_setpoints(case)
    return _pack_from_parts(case, layout, matrices, setpoints)


def _pack_from_parts(case, layout, matrices, setpoints) -> PackedSystem:
    w0 = case.omega0
    ng = len(case.generators)
    ni = len(case.ibrs)
    gp = np.zeros((ng, _core.NGP))
    gen_bus = np.zeros(ng, np.int64)
    gen_off = np.zeros(ng, np.int64)
    gen_ioff = np.zeros(ng, np.int64)
    tripped = set(matrices.state.tripped_generators)
    for k, g in enumerate(case.generators):
        x_ad2, x_aq2, x_d2, x_q2 = g.subtransient()
        row = gp[k]
        row[_core.GP_CSCALE] = g.base_mva / case.base_mva
        row[_core.GP_H] = g.h
        row[_core.GP_D] = g.d
        row[_core.GP_RS] = g.r_s
        row[_core.GP_RFD] = g.r_fd
        row[_core.GP_XLFD] = g.x_lfd
        row[_core.GP_R1D] = g.r_1d
        row[_core.GP_XL1D] = g.x_l1d
        row[_core.GP_R1Q] = g.r_1q
        row[_core.GP_XL1Q] = g.x_l1q
        row[_core.GP_R2Q] = g.r_2q
        row[_core.GP_XL2Q] = g.x_l2q
        row[_core.GP_XAD2] = x_ad2
        row[_core.GP_XAQ2] = x_aq2
        row[_core.GP_XD2] = x_d2
        row[_core.GP_XQ2] = x_q2
        row[_core.GP_XLS] = g.x_ls
        row[_core.GP_EFDSC] = g.r_fd / g.x_md
        row[_core.GP_RDROOP] = g.governor.r_droop
        row[_core.GP_T1] = g.governor.t1
        row[_core.GP_T2] = g.governor.t2
        row[_core.GP_T3] = g.governor.t3
        row[_core.GP_VMIN] = g.governor.v_min
        row[_core.GP_VMAX] = g.governor.v_max
        row[_core.GP_DT] = g.governor.d_t
        row[_core.GP_EK] = g.exciter.k
        row[_core.GP_ETA] = g.exciter.t_a
        row[_core.GP_ETB] = g.exciter.t_b
        row[_core.GP_ETE] = g.exciter.t_e
        row[_core.GP_EMIN] = g.exciter.e_min
        row[_core.GP_EMAX] = g.exciter.e_max
        row[_core.GP_ETR] = g.exciter.t_r
        row[_core.GP_PREF] = setpoints.gen_p_ref[k]
        row[_core.GP_VREF] = setpoints.gen_v_ref[k]
        row[_core.GP_ACTIVE] = 0.0 if g.id in tripped else 1.0
        gen_bus[k] = case.bus_index(g.bus)
        gen_off[k] = layout.gen_offsets[k]
        gen_ioff[k] = layout.i_offset + 3 * k
    ip = np.zeros((ni, _core.NIP))
    ibr_bus = np.zeros(ni, np.int64)
    ibr_off = np.zeros(ni, np.int64)
    ibr_ioff = np.zeros(ni, np.int64)
    for k, b in enumerate(case.ibrs):
        row = ip[k]
        row[_core.IP_CSCALE] = b.base_mva / case.base_mva
        row[_core.IP_KPPLL] = b.kp_pll
        row[_core.IP_KIPLL] = b.ki_pll
        row[_core.IP_WS] = w0
        row[_core.IP_KPC] = b.kp_cur
        row[_core.IP_KIC] = b.ki_cur
        row[_core.IP_KPP] = b.kp_pwr
        row[_core.IP_KIP] = b.ki_pwr
        row[_core.IP_KF] = b.k_fdroop
        row[_core.IP_KV] = b.k_vdroop
        row[_core.IP_RF] = b.r_f
        row[_core.IP_XF] = b.x_f
        row[_core.IP_PREF] = setpoints.ibr_p_ref[k]
        row[_core.IP_QREF] = setpoints.ibr_q_ref[k]
        row[_core.IP_VREF] = setpoints.ibr_v_ref[k]
        row[_core.IP_ACTIVE] = 1.0
        row[_core.IP_TM] = b.t_meas
        row[_core.IP_TFF] = b.t_ff
        ibr_bus[k] = case.bus_index(b.bus)
        ibr_off[k] = layout.ibr_offsets[k]
        ibr_ioff[k] = layout.i_offset + 3 * (ng + k)

    inj_rows = []
    pos = {b.id: i for i, b in enumerate(case.buses)}
    for bus_id, amp, freq, phase in matrices.state.injections:
        row = 3 * pos[bus_id] + PHASE_INDEX[phase.lower()]
        inj_rows.append((float(row), amp, 2.0 * np.pi * freq, 0.0))
    inj = np.array(inj_rows, dtype=float).reshape(-1, 4)

    return PackedSystem(case=case, layout=layout, matrices=matrices,
                        setpoints=setpoints, omega0=w0,
                        a_eq=np.ascontiguousarray(matrices.a_eq),
                        beq_diag=np.ascontiguousarray(np.diag(matrices.b_eq)),
                        gp=gp, gen_bus=gen_bus, gen_off=gen_off, gen_ioff=gen_ioff,
                        ip=ip, ibr_bus=ibr_bus, ibr_off=ibr_off, ibr_ioff=ibr_ioff,
                        inj=inj)


def series(packed: PackedSystem, x0, t0: float, order: int):
    """Coefficient table (order+1, n) and the order-L network residual vector."""
    packed.series_calls += 1
    return _core.series_table(np.asarray(x0, dtype=float), float(t0), order,
                              *packed.kernel_args())


def full_rhs(packed: PackedSystem, x, t: float) -> np.ndarray:
    packed.rhs_calls += 1
    return _core.rhs(np.asarray(x, dtype=float), float(t), *packed.kernel_args())


def defect_norm(qvec: np.ndarray) -> float:
    return float(np.max(np.abs(qvec))) if qvec.size else 0.0
