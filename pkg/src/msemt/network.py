"""Three-phase network state-space assembly.

The network is the linear block of the system:

    diag(C, L) d/dt [v; w] = [[-G, -B3], [B3^T, -R]] [v; w] + [i_inj; 0]

with per-phase diagonal parameter matrices and the signed incidence matrix
expanded blockwise (+1 -> I3).  Everything is normalised to per-unit on the
system MVA base with time in seconds, so C and L become time constants
(C_SI * Zbase and L_SI / Zbase) and A_eq has units of 1/s.

R-L loads are modelled as extra branches to ground (one +1 incidence entry,
adding w states); R-C loads fold into the bus shunt conductance/capacitance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import CaseError, PowerSystemCase

__all__ = [
    "DEFAULT_FAULT_CONDUCTANCE",
    "TopologyEvent",
    "TopologyState",
    "IncidenceMatrix",
    "NetworkMatrices",
    "build_incidence",
    "assemble",
    "network_rhs",
    "apply_topology_event",
    "dump_matrices",
]

DEFAULT_FAULT_CONDUCTANCE = 1.0e4  # S per phase; explicit solvers want much softer


def _expand3(b: np.ndarray) -> np.ndarray:
    """Blockwise expansion of a signed incidence matrix: entry -> entry * I3."""
    n, e = b.shape
    out = np.zeros((3 * n, 3 * e))
    for p in range(3):
        out[p::3, p::3] = b
    return out


@dataclass(frozen=True, eq=False)
class IncidenceMatrix:
    b: np.ndarray    # N x E over the line graph
    b3: np.ndarray   # 3N x 3E block expansion
    edge_buses: tuple[tuple[int, int], ...]  # (from_pos, to_pos) per line


def build_incidence(case: PowerSystemCase) -> IncidenceMatrix:
    """Signed incidence over the line graph, oriented low bus id -> high bus id."""
    n = len(case.buses)
    pos = {b.id: k for k, b in enumerate(case.buses)}
    cols = []
    edge_buses = []
    b = np.zeros((n, len(case.lines)))
    for e, line in enumerate(case.lines):
        i, j = sorted((line.from_bus, line.to_bus))
        b[pos[i], e] = 1.0
        b[pos[j], e] = -1.0
        edge_buses.append((pos[i], pos[j]))
    return IncidenceMatrix(b=b, b3=_expand3(b), edge_buses=tuple(edge_buses))


@dataclass(frozen=True, eq=False)
class TopologyEvent:
    """One switching action on the assembled network."""

    kind: str          # apply_fault | clear_fault | trip_generator |
                       # disconnect_load | reconnect_load | start_injection |
                       # stop_injection
    bus: int | None = None
    load: int | None = None
    generator: int | None = None
    conductance: float | None = None   # S per phase for faults
    amplitude: float = 0.0             # pu current for injections
    frequency: float = 0.0             # Hz
    phase: str = "a"


@dataclass(frozen=True, eq=False)
class TopologyState:
    """Accumulated switching state; assembly is a pure function of (case, state)."""

    faults: tuple[tuple[int, float], ...] = ()      # (bus id, G_fault SI)
    open_loads: tuple[int, ...] = ()                # load ids with RL branch open
    tripped_generators: tuple[int, ...] = ()
    injections: tuple[tuple[int, float, float, str], ...] = ()  # bus, amp, Hz, phase


@dataclass(frozen=True, eq=False)
class NetworkMatrices:
    case: PowerSystemCase
    state: TopologyState
    incidence: IncidenceMatrix
    n_bus: int
    n_edge: int                      # lines + RL load branches
    c_diag: np.ndarray               # 3N, per-unit seconds
    g_diag: np.ndarray               # 3N, pu
    l_diag: np.ndarray               # 3E, per-unit seconds
    r_diag: np.ndarray               # 3E, pu
    b3_full: np.ndarray              # 3N x 3E including load branches
    a_eq: np.ndarray                 # 3(N+E) square
    b_eq: np.ndarray                 # 3(N+E) square (diagonal), kept dense-diag
    z_base: np.ndarray               # per bus, ohm
    v_base: np.ndarray               # per bus, peak phase volts
    i_base: np.ndarray               # per bus, peak amps
    frozen_edges: tuple[int, ...]    # edge positions with w held at zero

    @property
    def dim(self) -> int:
        return 3 * (self.n_bus + self.n_edge)


def assemble(case: PowerSystemCase, incidence: IncidenceMatrix | None = None,
             state: TopologyState | None = None) -> NetworkMatrices:
    """Form A_eq and B_eq for the case under the given switching state."""
    if incidence is None:
        incidence = build_incidence(case)
    if state is None:
        state = TopologyState()

    n = len(case.buses)
    pos = {b.id: k for k, b in enumerate(case.buses)}
    s_base_va = case.base_mva * 1.0e6
    z_base = np.array([b.nominal_kv ** 2 / case.base_mva for b in case.buses])
    v_base = np.array([b.nominal_kv * 1.0e3 * math.sqrt(2.0 / 3.0) for b in case.buses])
    i_base = v_base / z_base

    c_bus = np.array([b.shunt_capacitance for b in case.buses])
    g_bus = np.array([b.shunt_conductance for b in case.buses])
    for line in case.lines:
        half = 0.5 * line.shunt_capacitance
        c_bus[pos[line.from_bus]] += half
        c_bus[pos[line.to_bus]] += half
    for ld in case.loads:
        if ld.kind == "RC" and ld.id not in state.open_loads:
            c_bus[pos[ld.bus]] += ld.capacitance
            if ld.resistance > 0.0:
                g_bus[pos[ld.bus]] += 1.0 / ld.resistance
    for bus_id, g_fault in state.faults:
        if bus_id not in pos:
            raise CaseError(f"fault event references missing bus {bus_id}")
        g_bus[pos[bus_id]] += g_fault

    rl_loads = [ld for ld in case.loads if ld.kind == "RL"]
    e_total = len(case.lines) + len(rl_loads)

    # extended incidence: lines keep both entries, load branches get a single +1
    b_full = np.zeros((n, e_total))
    b_full[:, :len(case.lines)] = incidence.b
    l_edges = np.empty(e_total)
    r_edges = np.empty(e_total)
    edge_zbase = np.empty(e_total)
    for e, line in enumerate(case.lines):
        zb = z_base[pos[line.from_bus]]
        edge_zbase[e] = zb
        l_edges[e] = line.inductance / zb
        r_edges[e] = line.resistance / zb
    frozen = []
    for k, ld in enumerate(rl_loads):
        e = len(case.lines) + k
        zb = z_base[pos[ld.bus]]
        edge_zbase[e] = zb
        b_full[pos[ld.bus], e] = 1.0
        l_edges[e] = ld.inductance / zb
        r_edges[e] = ld.resistance / zb
        if ld.id in state.open_loads:
            frozen.append(e)

    if np.any(l_edges <= 0.0):
        bad = int(np.argmax(l_edges <= 0.0))
        raise CaseError(f"singular inductance block at edge {bad}")

    c_diag = np.repeat(c_bus * z_base, 3)
    g_diag = np.repeat(g_bus * z_base, 3)
    l_diag = np.repeat(l_edges, 3)
    r_diag = np.repeat(r_edges, 3)
    if np.any(c_diag <= 0.0):
        raise CaseError("singular capacitance block")

    b3_full = _expand3(b_full)
    for e in frozen:
        b3_full[:, 3 * e:3 * e + 3] = 0.0

    dim = 3 * (n + e_total)
    drift = np.zeros((dim, dim))
    nv = 3 * n
    drift[:nv, :nv] = -np.diag(g_diag)
    drift[:nv, nv:] = -b3_full
    drift[nv:, :nv] = b3_full.T
    drift[nv:, nv:] = -np.diag(r_diag)
    for e in frozen:
        drift[nv + 3 * e:nv + 3 * e + 3, :] = 0.0

    inv_storage = np.concatenate([1.0 / c_diag, 1.0 / l_diag])
    a_eq = drift * inv_storage[:, None]
    b_eq = np.diag(inv_storage)
    for e in frozen:
        b_eq[nv + 3 * e:nv + 3 * e + 3, :] = 0.0

    injections = []
    for bus_id, amp, freq, phase in state.injections:
        if bus_id not in pos:
            raise CaseError(f"injection event references missing bus {bus_id}")
        injections.append((bus_id, amp, freq, phase))

    return NetworkMatrices(case=case, state=state, incidence=incidence,
                           n_bus=n, n_edge=e_total,
                           c_diag=c_diag, g_diag=g_diag, l_diag=l_diag,
                           r_diag=r_diag, b3_full=b3_full, a_eq=a_eq, b_eq=b_eq,
                           z_base=z_base, v_base=v_base, i_base=i_base,
                           frozen_edges=tuple(frozen))


def network_rhs(matrices: NetworkMatrices, psi, lam) -> np.ndarray:
    """d/dt [v; w] = A_eq psi + B_eq lam."""
    psi = np.asarray(psi, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if psi.shape[0] != matrices.dim or lam.shape[0] != matrices.dim:
        raise ValueError("psi/lambda dimension mismatch")
    return matrices.a_eq @ psi + matrices.b_eq @ lam


def apply_topology_event(matrices: NetworkMatrices, event: TopologyEvent) -> NetworkMatrices:
    """Re-assemble the network under one switching event.

    Assembly is deterministic in (case, state), so apply followed by clear
    returns bitwise-identical matrices.
    """
    st = matrices.state
    case = matrices.case
    if event.kind == "apply_fault":
        g = DEFAULT_FAULT_CONDUCTANCE if event.conductance is None else event.conductance
        if event.bus not in {b.id for b in case.buses}:
            raise CaseError(f"fault event references missing bus {event.bus}")
        st = replace(st, faults=st.faults + ((event.bus, g),))
    elif event.kind == "clear_fault":
        remaining = tuple(f for f in st.faults if f[0] != event.bus)
        if len(remaining) == len(st.faults):
            raise CaseError(f"no active fault at bus {event.bus} to clear")
        st = replace(st, faults=remaining)
    elif event.kind == "disconnect_load":
        if event.load not in {ld.id for ld in case.loads}:
            raise CaseError(f"disconnect event references missing load {event.load}")
        st = replace(st, open_loads=tuple(sorted(set(st.open_loads) | {event.load})))
    elif event.kind == "reconnect_load":
        if event.load not in st.open_loads:
            raise CaseError(f"load {event.load} is not disconnected")
        st = replace(st, open_loads=tuple(i for i in st.open_loads if i != event.load))
    elif event.kind == "trip_generator":
        if event.generator not in {g.id for g in case.generators}:
            raise CaseError(f"trip event references missing generator {event.generator}")
        st = replace(st, tripped_generators=tuple(sorted(set(st.tripped_generators)
                                                         | {event.generator})))
    elif event.kind == "start_injection":
        if event.bus not in {b.id for b in case.buses}:
            raise CaseError(f"injection event references missing bus {event.bus}")
        st = replace(st, injections=st.injections
                     + ((event.bus, event.amplitude, event.frequency, event.phase),))
    elif event.kind == "stop_injection":
        st = replace(st, injections=tuple(i for i in st.injections if i[0] != event.bus))
    else:
        raise CaseError(f"unknown topology event kind {event.kind!r}")
    return assemble(case, matrices.incidence, st)


def dump_matrices(matrices: NetworkMatrices) -> str:
    """Plain-text dump of the assembled operators for debugging."""
    out = [f"# network dump: {matrices.n_bus} buses, {matrices.n_edge} edges"]
    for name, arr in (("C", matrices.c_diag), ("G", matrices.g_diag),
                      ("L", matrices.l_diag), ("R", matrices.r_diag)):
        out.append(f"[{name} diag]")
        out.append(" ".join(f"{v:.17g}" for v in arr))
    out.append("[A_eq]")
    for row in matrices.a_eq:
        out.append(" ".join(f"{v:.17g}" for v in row))
    out.append("[B_eq diag]")
    out.append(" ".join(f"{v:.17g}" for v in np.diag(matrices.b_eq)))
    return "\n".join(out) + "\n"
