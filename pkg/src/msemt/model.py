"""Domain types for the power system case and the slow/fast state layout.

A case is loaded from a TOML document (see docs/case_format.md), validated,
and frozen.  Network quantities are given in SI units; machine and inverter
parameters are per-unit on the device MVA base.  Internally everything is
normalised to per-unit on the system base with time kept in seconds, so
inductances and capacitances become time constants (X/w0 and C*Zbase).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

__all__ = [
    "CaseError",
    "Bus",
    "Line",
    "Load",
    "GovernorParams",
    "ExciterParams",
    "SynchronousGenerator",
    "GridFollowingIbr",
    "PowerSystemCase",
    "StateLayout",
    "load_case",
    "loads_case_text",
    "build_layout",
    "device_rhs",
]

GEN_STATES = ("delta", "domega", "lam_fd", "lam_1d", "lam_1q", "lam_2q",
              "gov_v", "gov_r", "exc_ll", "efd", "vm2")
IBR_STATES = ("pll_delta", "pll_phi", "xi_p", "xi_q", "zeta_d", "zeta_q",
              "p_meas", "q_meas", "v_meas", "w_meas", "ff_d", "ff_q")
PHASES = ("a", "b", "c")


class CaseError(ValueError):
    """Raised for unparsable or inconsistent case documents."""


@dataclass(frozen=True, eq=False)
class Bus:
    id: int
    nominal_kv: float
    shunt_capacitance: float  # F per phase
    shunt_conductance: float = 0.0  # S per phase


@dataclass(frozen=True, eq=False)
class Line:
    """Series R-L branch between two buses; charging splits to the ends."""

    id: int
    from_bus: int
    to_bus: int
    resistance: float  # ohm per phase
    inductance: float  # H per phase
    shunt_capacitance: float = 0.0  # F per phase, total, folded half per end


@dataclass(frozen=True, eq=False)
class Load:
    """Static load branch: series R-L to ground, or parallel R-C bus shunt."""

    id: int
    bus: int
    kind: str  # "RL" | "RC"
    resistance: float  # ohm
    inductance: float = 0.0  # H (RL only)
    capacitance: float = 0.0  # F (RC only)


@dataclass(frozen=True, eq=False)
class GovernorParams:
    """TGOV1 steam turbine-governor: droop valve lag plus reheat lead-lag."""

    r_droop: float = 0.05
    t1: float = 0.5
    t2: float = 2.5
    t3: float = 7.5
    v_min: float = 0.0
    v_max: float = 1.2
    d_t: float = 0.0


@dataclass(frozen=True, eq=False)
class ExciterParams:
    """SEXS excitation system: lead-lag and first-order exciter with limits.

    The regulator senses the terminal magnitude through a transducer filter
    acting on the squared magnitude (time constant t_r); filtering before
    the square root keeps the voltage pathway analytic through faults.
    """

    k: float = 100.0
    t_a: float = 2.0
    t_b: float = 10.0
    t_e: float = 0.05
    e_min: float = -5.0
    e_max: float = 6.0
    t_r: float = 0.1


@dataclass(frozen=True, eq=False)
class SynchronousGenerator:
    """Voltage-behind-reactance machine: swing, four rotor windings, abc stator.

    Reactances are per-unit on (base_mva, bus nominal kV); they are converted
    to per-unit henries (X/w0) at packing time so that all dynamic equations
    run in seconds.
    """

    id: int
    bus: int
    base_mva: float
    h: float          # inertia constant, s
    d: float          # damping, pu torque / pu speed
    r_s: float        # stator resistance, pu
    x_ls: float       # stator leakage
    x_md: float       # d-axis magnetising
    x_mq: float       # q-axis magnetising
    r_fd: float
    x_lfd: float
    r_1d: float
    x_l1d: float
    r_1q: float
    x_l1q: float
    r_2q: float
    x_l2q: float
    p_set: float = 0.0   # MW dispatch target for initialisation
    v_set: float = 1.0   # pu voltage target for initialisation
    governor: GovernorParams = field(default_factory=GovernorParams)
    exciter: ExciterParams = field(default_factory=ExciterParams)

    def subtransient(self):
        """Return (x_ad'', x_aq'', x_d'', x_q'') parallel-combination reactances."""
        x_ad = 1.0 / (1.0 / self.x_md + 1.0 / self.x_lfd + 1.0 / self.x_l1d)
        x_aq = 1.0 / (1.0 / self.x_mq + 1.0 / self.x_l1q + 1.0 / self.x_l2q)
        return x_ad, x_aq, self.x_ls + x_ad, self.x_ls + x_aq


@dataclass(frozen=True, eq=False)
class GridFollowingIbr:
    """Grid-following inverter: PLL, power and current PI loops, droops, R-L filter.

    The regulators act on low-pass-filtered power and voltage measurements
    (time constant t_meas); instantaneous feedback of the converter terminal
    quantities couples into the network's electromagnetic modes and, for
    units large relative to the system base, turns them unstable.
    """

    id: int
    bus: int
    base_mva: float
    kp_pll: float
    ki_pll: float
    kp_cur: float
    ki_cur: float
    kp_pwr: float
    ki_pwr: float
    k_fdroop: float = 0.0
    k_vdroop: float = 0.0
    r_f: float = 0.005  # pu filter resistance
    x_f: float = 0.15   # pu filter reactance
    t_meas: float = 0.1  # s, P/Q/V measurement filter
    t_ff: float = 0.005  # s, terminal-voltage feedforward filter; an
                         # unfiltered feedforward turns the converter into an
                         # ideal current source that strips the network of
                         # damping around its LC resonances
    p_set: float = 0.0  # MW
    q_set: float = 0.0  # MVAr


@dataclass(frozen=True, eq=False)
class PowerSystemCase:
    name: str
    frequency_hz: float
    base_mva: float
    reference_generator: int  # generator id supplying theta_global
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    loads: tuple[Load, ...]
    generators: tuple[SynchronousGenerator, ...]
    ibrs: tuple[GridFollowingIbr, ...]

    @property
    def omega0(self) -> float:
        return 2.0 * math.pi * self.frequency_hz

    def bus_index(self, bus_id: int) -> int:
        for k, b in enumerate(self.buses):
            if b.id == bus_id:
                return k
        raise CaseError(f"unknown bus {bus_id}")


@dataclass(frozen=True, eq=False)
class StateLayout:
    """Flat state-vector layout: x = [x_slow | v_abc, w_abc, i_abc].

    The fast block holds every network state: 3N node voltages, 3E branch
    currents (lines first, then R-L load branches) and 3 terminal currents
    per source device (generators then IBRs, each ordered by id).
    """

    names: tuple[str, ...]
    tags: tuple[str, ...]  # "slow" | "fast" per state
    slow_dim: int
    n_bus: int
    n_edge: int
    n_src: int
    gen_offsets: tuple[int, ...]   # start of each generator's slow block
    ibr_offsets: tuple[int, ...]
    src_bus: tuple[int, ...]       # bus position of each source device
    _index: dict = field(repr=False, default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def v_offset(self) -> int:
        return self.slow_dim

    @property
    def w_offset(self) -> int:
        return self.slow_dim + 3 * self.n_bus

    @property
    def i_offset(self) -> int:
        return self.slow_dim + 3 * (self.n_bus + self.n_edge)

    @property
    def fast_dim(self) -> int:
        return 3 * (self.n_bus + self.n_edge + self.n_src)

    def offset_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown state {name!r}") from None

    def name_of(self, offset: int) -> str:
        return self.names[offset]

    def bus_v_slice(self, bus_pos: int) -> slice:
        o = self.v_offset + 3 * bus_pos
        return slice(o, o + 3)

    def src_i_slice(self, src_pos: int) -> slice:
        o = self.i_offset + 3 * src_pos
        return slice(o, o + 3)


# ---------------------------------------------------------------------------
# case loading

def _rows(doc, key):
    rows = doc.get(key, [])
    if not isinstance(rows, list):
        raise CaseError(f"[{key}] must be an array of tables")
    return rows


def _require(row, key, where):
    if key not in row:
        raise CaseError(f"{where}: missing field {key!r}")
    return row[key]


def loads_case_text(text: str, name: str = "<string>") -> PowerSystemCase:
    """Parse and validate a case document given as TOML text."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise CaseError(f"parse error in {name}: {exc}") from exc

    sysdoc = doc.get("system", {})
    freq = float(sysdoc.get("frequency_hz", 60.0))
    base_mva = float(sysdoc.get("base_mva", 100.0))

    buses = tuple(sorted((Bus(id=int(_require(r, "id", "bus")),
                              nominal_kv=float(_require(r, "nominal_kv", "bus")),
                              shunt_capacitance=float(_require(r, "shunt_capacitance", "bus")),
                              shunt_conductance=float(r.get("shunt_conductance", 0.0)))
                          for r in _rows(doc, "buses")), key=lambda b: b.id))
    lines = tuple(sorted((Line(id=int(_require(r, "id", "line")),
                               from_bus=int(_require(r, "from_bus", "line")),
                               to_bus=int(_require(r, "to_bus", "line")),
                               resistance=float(_require(r, "resistance", "line")),
                               inductance=float(_require(r, "inductance", "line")),
                               shunt_capacitance=float(r.get("shunt_capacitance", 0.0)))
                          for r in _rows(doc, "lines")), key=lambda l: l.id))
    loads = tuple(sorted((Load(id=int(_require(r, "id", "load")),
                               bus=int(_require(r, "bus", "load")),
                               kind=str(r.get("kind", "RL")).upper(),
                               resistance=float(_require(r, "resistance", "load")),
                               inductance=float(r.get("inductance", 0.0)),
                               capacitance=float(r.get("capacitance", 0.0)))
                          for r in _rows(doc, "loads")), key=lambda l: l.id))

    gens = []
    for r in _rows(doc, "generators"):
        gid = int(_require(r, "id", "generator"))
        gov = GovernorParams(**{k: float(v) for k, v in r.get("governor", {}).items()})
        exc = ExciterParams(**{k: float(v) for k, v in r.get("exciter", {}).items()})
        gens.append(SynchronousGenerator(
            id=gid, bus=int(_require(r, "bus", f"generator {gid}")),
            base_mva=float(_require(r, "base_mva", f"generator {gid}")),
            h=float(_require(r, "h", f"generator {gid}")),
            d=float(r.get("d", 0.0)),
            r_s=float(_require(r, "r_s", f"generator {gid}")),
            x_ls=float(_require(r, "x_ls", f"generator {gid}")),
            x_md=float(_require(r, "x_md", f"generator {gid}")),
            x_mq=float(_require(r, "x_mq", f"generator {gid}")),
            r_fd=float(_require(r, "r_fd", f"generator {gid}")),
            x_lfd=float(_require(r, "x_lfd", f"generator {gid}")),
            r_1d=float(_require(r, "r_1d", f"generator {gid}")),
            x_l1d=float(_require(r, "x_l1d", f"generator {gid}")),
            r_1q=float(_require(r, "r_1q", f"generator {gid}")),
            x_l1q=float(_require(r, "x_l1q", f"generator {gid}")),
            r_2q=float(_require(r, "r_2q", f"generator {gid}")),
            x_l2q=float(_require(r, "x_l2q", f"generator {gid}")),
            p_set=float(r.get("p_set", 0.0)),
            v_set=float(r.get("v_set", 1.0)),
            governor=gov, exciter=exc))
    gens = tuple(sorted(gens, key=lambda g: g.id))

    ibrs = []
    for r in _rows(doc, "ibrs"):
        iid = int(_require(r, "id", "ibr"))
        ibrs.append(GridFollowingIbr(
            id=iid, bus=int(_require(r, "bus", f"ibr {iid}")),
            base_mva=float(_require(r, "base_mva", f"ibr {iid}")),
            kp_pll=float(_require(r, "kp_pll", f"ibr {iid}")),
            ki_pll=float(_require(r, "ki_pll", f"ibr {iid}")),
            kp_cur=float(_require(r, "kp_cur", f"ibr {iid}")),
            ki_cur=float(_require(r, "ki_cur", f"ibr {iid}")),
            kp_pwr=float(_require(r, "kp_pwr", f"ibr {iid}")),
            ki_pwr=float(_require(r, "ki_pwr", f"ibr {iid}")),
            k_fdroop=float(r.get("k_fdroop", 0.0)),
            k_vdroop=float(r.get("k_vdroop", 0.0)),
            r_f=float(r.get("r_f", 0.005)),
            x_f=float(_require(r, "x_f", f"ibr {iid}")),
            t_meas=float(r.get("t_meas", 0.1)),
            t_ff=float(r.get("t_ff", 0.005)),
            p_set=float(r.get("p_set", 0.0)),
            q_set=float(r.get("q_set", 0.0))))
    ibrs = tuple(sorted(ibrs, key=lambda i: i.id))

    ref_gen = sysdoc.get("reference_generator")
    if ref_gen is None:
        if gens:
            ref_gen = gens[0].id
        else:
            ref_gen = -1
    case = PowerSystemCase(name=str(sysdoc.get("name", name)), frequency_hz=freq,
                           base_mva=base_mva, reference_generator=int(ref_gen),
                           buses=buses, lines=lines, loads=loads,
                           generators=gens, ibrs=ibrs)
    _validate(case)
    return case


def load_case(path) -> PowerSystemCase:
    """Load and validate a case document from a TOML file."""
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8")
    return loads_case_text(text, name=str(path))


def _validate(case: PowerSystemCase) -> None:
    if not case.buses:
        raise CaseError("empty network: case defines zero buses")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseError("duplicate bus ids")
    bus_ids = set(ids)
    for b in case.buses:
        if b.shunt_capacitance <= 0.0:
            raise CaseError(f"bus {b.id}: shunt capacitance must be > 0 "
                            "(every node carries a capacitive state)")
        if b.shunt_conductance < 0.0:
            raise CaseError(f"bus {b.id}: negative shunt conductance")
    for l in case.lines:
        for end in (l.from_bus, l.to_bus):
            if end not in bus_ids:
                raise CaseError(f"line {l.id} references missing bus {end}")
        if l.from_bus == l.to_bus:
            raise CaseError(f"line {l.id}: from_bus equals to_bus")
        if l.inductance <= 0.0:
            raise CaseError(f"line {l.id}: inductance must be > 0")
        kva = {b.id: b.nominal_kv for b in case.buses}
        if abs(kva[l.from_bus] - kva[l.to_bus]) > 1e-9:
            raise CaseError(f"line {l.id} connects buses of different nominal kV")
    for ld in case.loads:
        if ld.bus not in bus_ids:
            raise CaseError(f"load {ld.id} references missing bus {ld.bus}")
        if ld.kind not in ("RL", "RC"):
            raise CaseError(f"load {ld.id}: kind must be RL or RC")
        if ld.kind == "RL" and ld.inductance <= 0.0:
            raise CaseError(f"load {ld.id}: RL load needs inductance > 0")
        if ld.kind == "RC" and ld.capacitance < 0.0:
            raise CaseError(f"load {ld.id}: negative capacitance")
        if ld.resistance < 0.0:
            raise CaseError(f"load {ld.id}: negative resistance")
    for g in case.generators:
        if g.bus not in bus_ids:
            raise CaseError(f"generator {g.id} references missing bus {g.bus}")
        if g.h <= 0.0:
            raise CaseError(f"generator {g.id}: inertia must be > 0")
        for nm in ("x_ls", "x_md", "x_mq", "x_lfd", "x_l1d", "x_l1q", "x_l2q"):
            if getattr(g, nm) <= 0.0:
                raise CaseError(f"generator {g.id}: {nm} must be > 0")
        for nm in ("r_s", "r_fd", "r_1d", "r_1q", "r_2q"):
            if getattr(g, nm) < 0.0:
                raise CaseError(f"generator {g.id}: {nm} must be >= 0")
        _check_subtransient_invertible(case, g)
    for i in case.ibrs:
        if i.bus not in bus_ids:
            raise CaseError(f"ibr {i.id} references missing bus {i.bus}")
        if i.x_f <= 0.0:
            raise CaseError(f"ibr {i.id}: filter reactance must be > 0")
        for nm in ("kp_pll", "ki_pll", "kp_cur", "ki_cur", "kp_pwr", "ki_pwr"):
            if getattr(i, nm) < 0.0:
                raise CaseError(f"ibr {i.id}: {nm} must be >= 0")
    gen_ids = [g.id for g in case.generators]
    if len(set(gen_ids)) != len(gen_ids):
        raise CaseError("duplicate generator ids")
    if case.generators and case.reference_generator not in gen_ids:
        raise CaseError(f"reference generator {case.reference_generator} not in case")
    _check_connected(case)


def _check_connected(case: PowerSystemCase) -> None:
    n = len(case.buses)
    pos = {b.id: k for k, b in enumerate(case.buses)}
    adj = [[] for _ in range(n)]
    for l in case.lines:
        a, b = pos[l.from_bus], pos[l.to_bus]
        adj[a].append(b)
        adj[b].append(a)
    seen = [False] * n
    stack = [0]
    seen[0] = True
    while stack:
        k = stack.pop()
        for j in adj[k]:
            if not seen[j]:
                seen[j] = True
                stack.append(j)
    if not all(seen):
        missing = [case.buses[k].id for k, s in enumerate(seen) if not s]
        raise CaseError(f"network graph is disconnected; unreachable buses {missing}")


def _check_subtransient_invertible(case: PowerSystemCase, g: SynchronousGenerator) -> None:
    # abc subtransient inductance must stay invertible for every rotor angle
    from .transforms import park_matrix, park_inverse

    _, _, xdpp, xqpp = g.subtransient()
    d = np.diag([g.x_ls, xdpp, xqpp]) / case.omega0
    for th in np.linspace(0.0, 2.0 * math.pi, 25):
        m = park_inverse(th) @ d @ park_matrix(th)
        if abs(np.linalg.det(m)) < 1e-18:
            raise CaseError(f"generator {g.id}: singular subtransient inductance "
                            f"at rotor angle {th:.3f}")


# ---------------------------------------------------------------------------
# layout

def build_layout(case: PowerSystemCase) -> StateLayout:
    """Build the slow/fast layout: x = [generator and IBR internals | v, w, i]."""
    names: list[str] = []
    tags: list[str] = []
    gen_offsets = []
    ibr_offsets = []
    for g in case.generators:
        gen_offsets.append(len(names))
        for s in GEN_STATES:
            names.append(f"gen{g.id}.{s}")
            tags.append("slow")
    for i in case.ibrs:
        ibr_offsets.append(len(names))
        for s in IBR_STATES:
            names.append(f"ibr{i.id}.{s}")
            tags.append("slow")
    slow_dim = len(names)

    for b in case.buses:
        for p in PHASES:
            names.append(f"bus{b.id}.v_{p}")
            tags.append("fast")
    for l in case.lines:
        for p in PHASES:
            names.append(f"line{l.id}.w_{p}")
            tags.append("fast")
    rl_loads = [ld for ld in case.loads if ld.kind == "RL"]
    for ld in rl_loads:
        for p in PHASES:
            names.append(f"load{ld.id}.w_{p}")
            tags.append("fast")
    src_bus = []
    for g in case.generators:
        src_bus.append(case.bus_index(g.bus))
        for p in PHASES:
            names.append(f"gen{g.id}.i_{p}")
            tags.append("fast")
    for i in case.ibrs:
        src_bus.append(case.bus_index(i.bus))
        for p in PHASES:
            names.append(f"ibr{i.id}.i_{p}")
            tags.append("fast")

    layout = StateLayout(names=tuple(names), tags=tuple(tags), slow_dim=slow_dim,
                         n_bus=len(case.buses),
                         n_edge=len(case.lines) + len(rl_loads),
                         n_src=len(case.generators) + len(case.ibrs),
                         gen_offsets=tuple(gen_offsets),
                         ibr_offsets=tuple(ibr_offsets),
                         src_bus=tuple(src_bus),
                         _index={nm: k for k, nm in enumerate(names)})
    return layout


def device_rhs(case: PowerSystemCase, layout: StateLayout, x, t: float,
               setpoints=None):
    """Time derivatives of every non-network state (device internals and i_abc).

    Returns a full-length vector with the v and w rows zeroed; those rows
    belong to the network equation.  Pure function of (x, t) for fixed
    setpoints; defaults derive the references from the case dispatch values.
    """
    from . import _system

    packed = _system.pack_system(case, layout, setpoints=setpoints)
    f = _system.full_rhs(packed, np.asarray(x, dtype=float), float(t))
    f[layout.v_offset:layout.i_offset] = 0.0
    return f
