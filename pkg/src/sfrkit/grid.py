"""Grid case model, power flow, and dynamic equilibrium initialization.

A case file is a JSON document (see ``schemas/case.schema.json``) holding the
static network, machine dynamic data on each machine's own MVA base, control
parameters, and the unit-commitment vector. ``GridCase`` keeps the file values
verbatim so that serialize -> parse round-trips exactly; per-unit conversion
to the system base happens where stacked parameter arrays are built
(:func:`machine_sysbase`, :func:`governor_sysbase`).

Conventions: angles in rad, powers in pu on ``base_mva`` unless a field name
says MW/MVAr, inertia H in seconds on the named base, loads constant power
for the power flow (folded to constant impedance only in the dynamic model).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import jsonschema

from .devices import (EXCITER_STATES, GOVERNOR_STATES, MACHINE_STATES,
                      exciter_init, governor_init, machine_init)
from .errors import (CaseError, CommitmentError, EquilibriumError,
                     PowerFlowError)

_SCHEMA = None


def _case_schema() -> dict:
    global _SCHEMA
    if _SCHEMA is None:
        with resources.files("sfrkit.schemas").joinpath("case.schema.json").open() as fh:
            _SCHEMA = json.load(fh)
    return _SCHEMA


# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bus:
    id: int
    type: str                   # "slack" | "pv" | "pq"
    vm: float = 1.0             # setpoint (slack/pv) or initial guess (pq)
    pload_mw: float = 0.0
    qload_mvar: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0              # total line charging susceptance, pu
    tap: float = 1.0            # on the from side
    status: int = 1


@dataclass(frozen=True)
class Machine:
    id: str
    bus: int
    mva: float                  # machine base
    h: float                    # s, on machine base
    xd: float                   # machine-base reactances
    xq: float
    xdp: float
    xqp: float
    td0p: float
    tq0p: float
    p_mw: float                 # dispatch (slack: initial guess only)
    d: float = 0.0
    ra: float = 0.0


@dataclass(frozen=True)
class Exciter:
    machine: str
    ka: float
    ta: float
    ke: float
    te: float
    kf: float
    tf: float
    vr_min: float = -10.0
    vr_max: float = 10.0


@dataclass(frozen=True)
class Governor:
    machine: str
    model: str                  # "TGOV1" | "IEESGO" | "GAST"
    r: float                    # droop, machine base
    t1: float
    t2: float
    t3: float
    t4: float = 0.0             # IEESGO only
    k2: float = 0.7             # IEESGO only
    dt: float = 0.0             # TGOV1/GAST turbine damping
    v_min: float = 0.0          # machine-base power limits
    v_max: float = 1.2
    p_min: float = 0.0
    p_max: float = 1.2


@dataclass(frozen=True)
class GridCase:
    """Immutable static + dynamic description of one power system."""
    base_mva: float
    f0_hz: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    machines: tuple[Machine, ...]
    exciters: tuple[Exciter, ...]
    governors: tuple[Governor, ...]
    u_on: tuple[int, ...]

    @property
    def n_g(self) -> int:
        return len(self.machines)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self, bus_id: int) -> int:
        try:
            return self._bus_pos[bus_id]
        except KeyError:
            raise CaseError(f"unknown bus id {bus_id}")

    def machine_index(self, machine_id: str) -> int:
        try:
            return self._mach_pos[machine_id]
        except KeyError:
            raise CaseError(f"unknown machine id {machine_id!r}")

    def exciter_for(self, machine_id: str) -> Optional[Exciter]:
        return self._exc_map.get(machine_id)

    def governor_for(self, machine_id: str) -> Optional[Governor]:
        return self._gov_map.get(machine_id)

    @property
    def committed(self) -> np.ndarray:
        return np.asarray(self.u_on, dtype=bool)

    def committed_machines(self) -> list[Machine]:
        return [m for m, on in zip(self.machines, self.u_on) if on]

    def __post_init__(self):
        object.__setattr__(self, "_bus_pos",
                           {b.id: i for i, b in enumerate(self.buses)})
        object.__setattr__(self, "_mach_pos",
                           {m.id: i for i, m in enumerate(self.machines)})
        object.__setattr__(self, "_exc_map",
                           {e.machine: e for e in self.exciters})
        object.__setattr__(self, "_gov_map",
                           {g.machine: g for g in self.governors})

    def __eq__(self, other):
        if not isinstance(other, GridCase):
            return NotImplemented
        return (self.base_mva, self.f0_hz, self.buses, self.branches,
                self.machines, self.exciters, self.governors, self.u_on) == \
               (other.base_mva, other.f0_hz, other.buses, other.branches,
                other.machines, other.exciters, other.governors, other.u_on)


def machine_sysbase(m: Machine, base_mva: float) -> dict:
    """Machine parameters converted to the system base."""
    k = base_mva / m.mva
    return {
        "h": m.h / k, "d": m.d / k,
        "ra": m.ra * k, "xd": m.xd * k, "xq": m.xq * k,
        "xdp": m.xdp * k, "xqp": m.xqp * k,
        "td0p": m.td0p, "tq0p": m.tq0p,
        "p": m.p_mw / base_mva,
    }


def governor_sysbase(g: Governor, machine_mva: float, base_mva: float) -> dict:
    """Governor parameters converted to the system base."""
    k = base_mva / machine_mva
    return {
        "r": g.r * k, "dt": g.dt / k,
        "t1": g.t1, "t2": g.t2, "t3": g.t3, "t4": g.t4, "k2": g.k2,
        "v_min": g.v_min / k, "v_max": g.v_max / k,
        "p_min": g.p_min / k, "p_max": g.p_max / k,
    }


# ---------------------------------------------------------------------------
# state layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateLayout:
    """Deterministic index map of the dynamic and algebraic vectors.

    Dynamic states: committed machines in case-file order, each contributing
    [delta, omega, eqp, edp] + exciter states (if any) + governor states (if
    any). Algebraic variables: (vre, vim) pairs per bus in case-file order.
    """
    entries: tuple[tuple[str, str], ...]        # (machine id, state name)
    alg_entries: tuple[tuple[int, str], ...]    # (bus id, "vre"|"vim")
    z_indices: tuple[int, ...]                  # omega positions
    machine_ids: tuple[str, ...]                # committed, in order

    @property
    def n(self) -> int:
        return len(self.entries)

    @property
    def l(self) -> int:
        return len(self.alg_entries)

    def index(self, machine_id: str, state: str) -> int:
        return self._pos[(machine_id, state)]

    def machine_states(self, machine_id: str) -> dict[str, int]:
        return {s: i for i, (m, s) in enumerate(self.entries) if m == machine_id}

    def governor_indices(self, machine_id: str, model: str) -> list[int]:
        return [self.index(machine_id, s) for s in GOVERNOR_STATES[model]]

    @property
    def speed_governor_indices(self) -> tuple[int, ...]:
        """Indices of the rotor-speed and governor states (the support of
        post-disturbance initial deviations)."""
        gov_names = {s for names in GOVERNOR_STATES.values() for s in names}
        keep = gov_names | {"omega"}
        return tuple(i for i, (_, s) in enumerate(self.entries) if s in keep)

    def __post_init__(self):
        object.__setattr__(self, "_pos",
                           {e: i for i, e in enumerate(self.entries)})
        if len(self._pos) != len(self.entries):
            raise CaseError("duplicate state entry in layout")


def build_state_layout(case: GridCase) -> StateLayout:
    entries: list[tuple[str, str]] = []
    z: list[int] = []
    ids: list[str] = []
    for m, on in zip(case.machines, case.u_on):
        if not on:
            continue
        ids.append(m.id)
        for s in MACHINE_STATES:
            if s == "omega":
                z.append(len(entries))
            entries.append((m.id, s))
        if case.exciter_for(m.id) is not None:
            entries.extend((m.id, s) for s in EXCITER_STATES)
        gov = case.governor_for(m.id)
        if gov is not None:
            entries.extend((m.id, s) for s in GOVERNOR_STATES[gov.model])
    alg = []
    for b in case.buses:
        alg.append((b.id, "vre"))
        alg.append((b.id, "vim"))
    return StateLayout(entries=tuple(entries), alg_entries=tuple(alg),
                       z_indices=tuple(z), machine_ids=tuple(ids))


# ---------------------------------------------------------------------------
# parsing / validation / serialization
# ---------------------------------------------------------------------------

def parse_case(doc: dict, source: str = "<dict>") -> GridCase:
    """Validate a raw case document and build a GridCase."""
    try:
        jsonschema.validate(doc, _case_schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CaseError(f"{source}: schema violation at {path}: {exc.message}")

    buses = tuple(Bus(id=b["id"], type=b["type"], vm=b.get("vm", 1.0),
                      pload_mw=b.get("pload_mw", 0.0),
                      qload_mvar=b.get("qload_mvar", 0.0))
                  for b in doc["buses"])
    branches = tuple(Branch(from_bus=br["from"], to_bus=br["to"],
                            r=br.get("r", 0.0), x=br["x"], b=br.get("b", 0.0),
                            tap=br.get("tap", 1.0), status=br.get("status", 1))
                     for br in doc["branches"])
    machines = tuple(Machine(id=m["id"], bus=m["bus"], mva=m["mva"], h=m["h"],
                             xd=m["xd"], xq=m["xq"], xdp=m["xdp"], xqp=m["xqp"],
                             td0p=m["td0p"], tq0p=m["tq0p"], p_mw=m["p_mw"],
                             d=m.get("d", 0.0), ra=m.get("ra", 0.0))
                     for m in doc["machines"])
    exciters = tuple(Exciter(machine=e["machine"], ka=e["ka"], ta=e["ta"],
                             ke=e["ke"], te=e["te"], kf=e["kf"], tf=e["tf"],
                             vr_min=e.get("vr_min", -10.0),
                             vr_max=e.get("vr_max", 10.0))
                     for e in doc["exciters"])
    governors = tuple(Governor(machine=g["machine"], model=g["model"],
                               r=g["r"], t1=g["t1"], t2=g["t2"], t3=g["t3"],
                               t4=g.get("t4", 0.0), k2=g.get("k2", 0.7),
                               dt=g.get("dt", 0.0),
                               v_min=g.get("v_min", 0.0),
                               v_max=g.get("v_max", 1.2),
                               p_min=g.get("p_min", 0.0),
                               p_max=g.get("p_max", 1.2))
                      for g in doc["governors"])
    case = GridCase(base_mva=doc["base_mva"], f0_hz=doc["f0_hz"],
                    buses=buses, branches=branches, machines=machines,
                    exciters=exciters, governors=governors,
                    u_on=tuple(doc["u_on"]))
    _validate_semantics(case, source)
    return case


def _validate_semantics(case: GridCase, source: str) -> None:
    def err(msg: str):
        raise CaseError(f"{source}: {msg}")

    bus_ids = [b.id for b in case.buses]
    if len(set(bus_ids)) != len(bus_ids):
        dup = sorted({i for i in bus_ids if bus_ids.count(i) > 1})
        err(f"duplicate bus id {dup[0]}")
    slacks = [b for b in case.buses if b.type == "slack"]
    if len(slacks) != 1:
        err(f"exactly one slack bus required, found {len(slacks)}")
    mach_ids = [m.id for m in case.machines]
    if len(set(mach_ids)) != len(mach_ids):
        dup = sorted({i for i in mach_ids if mach_ids.count(i) > 1})
        err(f"duplicate machine id {dup[0]!r}")
    bus_set = set(bus_ids)
    mach_buses = set()
    for m in case.machines:
        if m.bus not in bus_set:
            err(f"machine {m.id!r} references unknown bus {m.bus}")
        if m.bus in mach_buses:
            err(f"more than one machine at bus {m.bus}")
        mach_buses.add(m.bus)
    for br in case.branches:
        if br.from_bus not in bus_set or br.to_bus not in bus_set:
            err(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
        if br.r == 0.0 and br.x == 0.0:
            err(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
    mach_set = set(mach_ids)
    for e in case.exciters:
        if e.machine not in mach_set:
            err(f"exciter references unknown machine {e.machine!r}")
    seen = set()
    for g in case.governors:
        if g.machine not in mach_set:
            err(f"governor references unknown machine {g.machine!r}")
        if g.machine in seen:
            err(f"more than one governor on machine {g.machine!r}")
        seen.add(g.machine)
    seen = set()
    for e in case.exciters:
        if e.machine in seen:
            err(f"more than one exciter on machine {e.machine!r}")
        seen.add(e.machine)
    if len(case.u_on) != case.n_g:
        err(f"u_on length {len(case.u_on)} != number of machines {case.n_g}")
    for m, on in zip(case.machines, case.u_on):
        if on and (m.h <= 0):
            err(f"machine {m.id!r}: H must be positive")
        gov = case.governor_for(m.id)
        if on and gov is not None and gov.r <= 0:
            err(f"machine {m.id!r}: droop R must be positive")
    _check_commitment(case, case.u_on)
    if not _connected(case):
        err("network is not connected over in-service branches")


def _check_commitment(case: GridCase, u_on: Sequence[int]) -> None:
    if len(u_on) != case.n_g:
        raise CommitmentError(
            f"u_on length {len(u_on)} != number of machines {case.n_g}")
    if any(u not in (0, 1) for u in u_on):
        raise CommitmentError("u_on entries must be 0 or 1")
    if not any(u_on):
        raise CommitmentError("all-zero commitment: no machine committed")
    slack_bus = next(b.id for b in case.buses if b.type == "slack")
    slack_mach = [i for i, m in enumerate(case.machines) if m.bus == slack_bus]
    if not slack_mach:
        raise CaseError("slack bus has no machine")
    if not u_on[slack_mach[0]]:
        raise CommitmentError("slack-bus machine cannot be decommitted")


def _connected(case: GridCase) -> bool:
    adj: dict[int, set[int]] = {b.id: set() for b in case.buses}
    for br in case.branches:
        if br.status:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    if not adj:
        return False
    seen = set()
    stack = [case.buses[0].id]
    while stack:
        b = stack.pop()
        if b in seen:
            continue
        seen.add(b)
        stack.extend(adj[b] - seen)
    return len(seen) == len(adj)


def load_case(path) -> GridCase:
    """Load and validate a case file."""
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise CaseError(f"case file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}: line {exc.lineno}, column {exc.colno}: "
                        f"{exc.msg}")
    return parse_case(doc, source=str(path))


def bundled_case_path(name: str) -> Path:
    """Path of a case shipped with the package (e.g. 'three_machine')."""
    p = resources.files("sfrkit.cases").joinpath(f"{name}.json")
    return Path(str(p))


def case_to_dict(case: GridCase) -> dict:
    """Serialize to the case-file document format (round-trips exactly)."""
    return {
        "base_mva": case.base_mva,
        "f0_hz": case.f0_hz,
        "buses": [{"id": b.id, "type": b.type, "vm": b.vm,
                   "pload_mw": b.pload_mw, "qload_mvar": b.qload_mvar}
                  for b in case.buses],
        "branches": [{"from": br.from_bus, "to": br.to_bus, "r": br.r,
                      "x": br.x, "b": br.b, "tap": br.tap, "status": br.status}
                     for br in case.branches],
        "machines": [{"id": m.id, "bus": m.bus, "mva": m.mva, "h": m.h,
                      "d": m.d, "ra": m.ra, "xd": m.xd, "xq": m.xq,
                      "xdp": m.xdp, "xqp": m.xqp, "td0p": m.td0p,
                      "tq0p": m.tq0p, "p_mw": m.p_mw}
                     for m in case.machines],
        "exciters": [{"machine": e.machine, "ka": e.ka, "ta": e.ta,
                      "ke": e.ke, "te": e.te, "kf": e.kf, "tf": e.tf,
                      "vr_min": e.vr_min, "vr_max": e.vr_max}
                     for e in case.exciters],
        "governors": [_gov_to_dict(g) for g in case.governors],
        "u_on": list(case.u_on),
    }


def _gov_to_dict(g: Governor) -> dict:
    base = {"machine": g.machine, "model": g.model, "r": g.r,
            "t1": g.t1, "t2": g.t2, "t3": g.t3}
    if g.model == "IEESGO":
        base.update(t4=g.t4, k2=g.k2, p_min=g.p_min, p_max=g.p_max)
    else:
        base.update(dt=g.dt, v_min=g.v_min, v_max=g.v_max)
    return base


def save_case(case: GridCase, path) -> None:
    with open(path, "w") as fh:
        json.dump(case_to_dict(case), fh, indent=1)
        fh.write("\n")


def apply_unit_commitment(case: GridCase, u_on: Sequence[int]) -> GridCase:
    """Return the case with a new commitment vector applied.

    Decommitted machines contribute no states, injections, or droop anywhere
    downstream; their buses are treated as PQ in the power flow. Idempotent.
    """
    u = tuple(int(v) for v in u_on)
    _check_commitment(case, u)
    if u == case.u_on:
        return case
    return replace(case, u_on=u)


def commitment_key(u_on: Sequence[int]) -> str:
    """Canonical bit-string key of a commitment vector."""
    return "".join("1" if v else "0" for v in u_on)


# ---------------------------------------------------------------------------
# operating point
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperatingPoint:
    """Solved power flow, optionally completed with the dynamic equilibrium.

    Machine-indexed arrays cover all machines in case order; decommitted
    entries are zero (injections) or NaN (states that do not exist).
    """
    vm: np.ndarray              # [n_bus] pu
    va: np.ndarray              # [n_bus] rad
    p_inj: np.ndarray           # [n_g] pu machine injections
    q_inj: np.ndarray           # [n_g] pu
    pf_mismatch: float
    layout: Optional[StateLayout] = None
    x_e: Optional[np.ndarray] = None
    y_e: Optional[np.ndarray] = None
    p_c: Optional[np.ndarray] = None       # [n_g] governor reference / fixed Tm
    vref: Optional[np.ndarray] = None      # [n_g] AVR reference (NaN: no AVR)
    efd_const: Optional[np.ndarray] = None  # [n_g] fixed Efd (NaN: has AVR)
    eq_residual: Optional[float] = None

    @property
    def initialized(self) -> bool:
        return self.x_e is not None


def build_ybus(case: GridCase) -> np.ndarray:
    """Dense complex bus admittance matrix from in-service branches."""
    n = case.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if not br.status:
            continue
        i = case.bus_index(br.from_bus)
        j = case.bus_index(br.to_bus)
        ys = 1.0 / complex(br.r, br.x)
        bc = 0.5j * br.b
        t = br.tap
        y[i, i] += (ys + bc) / (t * t)
        y[j, j] += ys + bc
        y[i, j] -= ys / t
        y[j, i] -= ys / t
    return y


def solve_power_flow(case: GridCase, tol: float = 1e-8,
                     max_iter: int = 20) -> OperatingPoint:
    """Newton-Raphson power flow in polar coordinates.

    Loads are constant power here. Committed machines inject their dispatch
    at PV buses; the slack absorbs the residual. Raises PowerFlowError with
    the final mismatch if not converged within ``max_iter``.
    """
    n = case.n_bus
    ybus = build_ybus(case)
    committed = case.committed

    bus_type = {}
    for b in case.buses:
        bus_type[b.id] = b.type
    # decommitted machine buses become PQ
    for m, on in zip(case.machines, committed):
        if not on and bus_type[m.bus] == "pv":
            bus_type[m.bus] = "pq"

    slack = [case.bus_index(b.id) for b in case.buses if bus_type[b.id] == "slack"]
    pv = [case.bus_index(b.id) for b in case.buses if bus_type[b.id] == "pv"]
    pq = [case.bus_index(b.id) for b in case.buses if bus_type[b.id] == "pq"]
    slack_i = slack[0]
    pvpq = pv + pq

    p_spec = np.zeros(n)
    q_spec = np.zeros(n)
    for b in case.buses:
        i = case.bus_index(b.id)
        p_spec[i] -= b.pload_mw / case.base_mva
        q_spec[i] -= b.qload_mvar / case.base_mva
    for m, on in zip(case.machines, committed):
        if on:
            p_spec[case.bus_index(m.bus)] += m.p_mw / case.base_mva

    vm = np.array([b.vm for b in case.buses], dtype=float)
    vm[pq] = np.array([case.buses[i].vm for i in pq])
    va = np.zeros(n)

    def mismatch(v):
        s_calc = v * np.conj(ybus @ v)
        dp = p_spec - s_calc.real
        dq = q_spec - s_calc.imag
        return np.concatenate([dp[pvpq], dq[pq]]), s_calc

    for it in range(max_iter + 1):
        v = vm * np.exp(1j * va)
        f, s_calc = mismatch(v)
        worst = np.max(np.abs(f)) if f.size else 0.0
        if worst <= tol:
            break
        if it == max_iter:
            raise PowerFlowError(
                f"power flow did not converge in {max_iter} iterations "
                f"(max mismatch {worst:.3e} pu)")
        i_calc = ybus @ v
        dv = np.diag(v)
        di = np.diag(i_calc)
        dvn = np.diag(v / np.abs(v))
        ds_dva = 1j * dv @ np.conj(di - ybus @ dv)
        ds_dvm = dv @ np.conj(ybus @ dvn) + np.conj(di) @ dvn
        j11 = ds_dva[np.ix_(pvpq, pvpq)].real
        j12 = ds_dvm[np.ix_(pvpq, pq)].real
        j21 = ds_dva[np.ix_(pq, pvpq)].imag
        j22 = ds_dvm[np.ix_(pq, pq)].imag
        jac = np.block([[j11, j12], [j21, j22]])
        try:
            dx = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError:
            raise PowerFlowError("singular power-flow Jacobian")
        na = len(pvpq)
        va[pvpq] += dx[:na]
        vm[pq] += dx[na:]

    p_inj = np.zeros(case.n_g)
    q_inj = np.zeros(case.n_g)
    for k, (m, on) in enumerate(zip(case.machines, committed)):
        if not on:
            continue
        i = case.bus_index(m.bus)
        b = case.buses[i]
        p_inj[k] = s_calc[i].real + b.pload_mw / case.base_mva
        q_inj[k] = s_calc[i].imag + b.qload_mvar / case.base_mva
    return OperatingPoint(vm=vm, va=va, p_inj=p_inj, q_inj=q_inj,
                          pf_mismatch=float(worst))


def init_dynamic_equilibrium(case: GridCase, pf: OperatingPoint,
                             check_tol: float = 1e-8) -> OperatingPoint:
    """Complete a solved power flow with the dynamic-state equilibrium.

    Machine, exciter, and governor states are back-computed from the
    terminal conditions; governor references P_C are chosen so that each
    governor outputs the dispatched mechanical power at nominal speed. The
    assembled (x_e, y_e) is verified against the DAE residual.
    """
    layout = build_state_layout(case)
    x_e = np.full(layout.n, np.nan)
    p_c = np.zeros(case.n_g)
    vref = np.full(case.n_g, np.nan)
    efd_const = np.full(case.n_g, np.nan)

    for k, (m, on) in enumerate(zip(case.machines, case.committed)):
        if not on:
            continue
        par = machine_sysbase(m, case.base_mva)
        i = case.bus_index(m.bus)
        delta, eqp, edp, efd, tm = machine_init(
            pf.vm[i], pf.va[i], pf.p_inj[k], pf.q_inj[k],
            par["ra"], par["xd"], par["xq"], par["xdp"], par["xqp"])
        x_e[layout.index(m.id, "delta")] = delta
        x_e[layout.index(m.id, "omega")] = 0.0
        x_e[layout.index(m.id, "eqp")] = eqp
        x_e[layout.index(m.id, "edp")] = edp

        exc = case.exciter_for(m.id)
        if exc is not None:
            rf, vr, vr_ref = exciter_init(efd, pf.vm[i], exc.ka, exc.ke,
                                          exc.kf, exc.tf)
            if not (exc.vr_min <= vr <= exc.vr_max):
                raise EquilibriumError(
                    f"machine {m.id!r}: regulator output {vr:.3f} outside "
                    f"[{exc.vr_min}, {exc.vr_max}] at initialization")
            x_e[layout.index(m.id, "efd")] = efd
            x_e[layout.index(m.id, "rf")] = rf
            x_e[layout.index(m.id, "vr")] = vr
            vref[k] = vr_ref
        else:
            efd_const[k] = efd

        gov = case.governor_for(m.id)
        p_c[k] = tm
        if gov is not None:
            gpar = governor_sysbase(gov, m.mva, case.base_mva)
            lo, hi = ((gpar["p_min"], gpar["p_max"]) if gov.model == "IEESGO"
                      else (gpar["v_min"], gpar["v_max"]))
            if not (lo <= tm <= hi):
                raise EquilibriumError(
                    f"machine {m.id!r}: governor output {tm:.3f} pu outside "
                    f"limits [{lo:.3f}, {hi:.3f}] at initialization")
            states = governor_init(gov.model, np.array([tm]))[:, 0]
            for name, val in zip(GOVERNOR_STATES[gov.model], states):
                x_e[layout.index(m.id, name)] = val

    v = pf.vm * np.exp(1j * pf.va)
    y_e = np.empty(layout.l)
    y_e[0::2] = v.real
    y_e[1::2] = v.imag

    op = OperatingPoint(vm=pf.vm.copy(), va=pf.va.copy(),
                        p_inj=pf.p_inj.copy(), q_inj=pf.q_inj.copy(),
                        pf_mismatch=pf.pf_mismatch, layout=layout,
                        x_e=x_e, y_e=y_e, p_c=p_c, vref=vref,
                        efd_const=efd_const)

    from .dynamics import SystemModel   # deferred: dynamics imports grid
    model = SystemModel(case, op)
    f, g = model.residual(x_e, y_e)
    worst_f = np.max(np.abs(f)) if f.size else 0.0
    worst_g = np.max(np.abs(g)) if g.size else 0.0
    resid = max(worst_f, worst_g)
    if resid > check_tol:
        k = int(np.argmax(np.abs(f)))
        mid, sname = layout.entries[k]
        raise EquilibriumError(
            f"equilibrium residual {resid:.3e} exceeds {check_tol:.1e} "
            f"(worst state {mid}:{sname})")
    return replace(op, eq_residual=float(resid))


def export_operating_point(op: OperatingPoint, case: GridCase) -> dict:
    """JSON-ready export: V, theta, P, Q, and x_e keyed by machine/state."""
    out = {
        "V": {str(b.id): float(op.vm[i]) for i, b in enumerate(case.buses)},
        "theta": {str(b.id): float(op.va[i]) for i, b in enumerate(case.buses)},
        "P": {m.id: float(op.p_inj[k]) for k, m in enumerate(case.machines)},
        "Q": {m.id: float(op.q_inj[k]) for k, m in enumerate(case.machines)},
    }
    if op.initialized:
        x_e: dict[str, dict[str, float]] = {}
        for i, (mid, sname) in enumerate(op.layout.entries):
            x_e.setdefault(mid, {})[sname] = float(op.x_e[i])
        out["x_e"] = x_e
    return out
