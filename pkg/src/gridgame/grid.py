"""Static grid model and Newton-Raphson AC power flow.

All internal quantities are per-unit on ``case.s_base``; MW / MVAr appear only
in the case data and in the flow results returned to callers.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

PF_TOL = 1e-8
PF_MAX_ITER = 30


class CaseParseError(ValueError):
    """Malformed case file; ``line`` is 1-based (0 when not line-specific)."""

    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class CaseValidationError(ValueError):
    pass


class BusKind(str, Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    base_kv: float
    p_load: float = 0.0  # MW
    q_load: float = 0.0  # MVAr
    p_gen: float = 0.0  # MW, scheduled
    v_setpoint: float = 1.0  # pu, pv/slack only
    g_shunt: float = 0.0  # MW consumed at 1 pu
    b_shunt: float = 0.0  # MVAr injected at 1 pu (capacitive > 0)


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0  # total line charging, pu
    rating_mva: float = 0.0  # 0 = unrated
    tap: float = 1.0  # fixed off-nominal ratio at the from side
    in_service: bool = True

    @property
    def z_mag(self) -> float:
        return math.hypot(self.r, self.x)

    def series_admittance(self) -> tuple[float, float]:
        """(g, b) of 1/(r + jx); an inductive line has b < 0."""
        den = self.r * self.r + self.x * self.x
        return self.r / den, -self.x / den


@dataclass(frozen=True)
class GridCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    s_base: float = 100.0
    f_nominal: float = 60.0
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "_index", {b.id: k for k, b in enumerate(self.buses)})

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def index(self, bus_id: int) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise KeyError(f"unknown bus {bus_id}") from None

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.index(bus_id)]

    @property
    def slack_index(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.kind is BusKind.SLACK)

    def load_bus_ids(self) -> list[int]:
        return [b.id for b in self.buses if b.kind is BusKind.PQ]

    def with_buses(self, buses) -> "GridCase":
        return GridCase(tuple(buses), self.branches, self.s_base, self.f_nominal)

    def with_branches(self, branches) -> "GridCase":
        return GridCase(self.buses, tuple(branches), self.s_base, self.f_nominal)


@dataclass
class PowerFlowSolution:
    """Solved operating point.

    Branch flows are directed: ``p_from[k]`` leaves ``from_bus`` towards
    ``to_bus`` and ``p_to[k]`` leaves ``to_bus`` towards ``from_bus``, so
    ``p_from + p_to`` is the branch loss. Flows and generation are MW / MVAr.
    """

    v_mag: np.ndarray
    v_ang: np.ndarray
    p_from: np.ndarray
    q_from: np.ndarray
    p_to: np.ndarray
    q_to: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    energized: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float

    @property
    def p_flow(self) -> np.ndarray:
        return self.p_from

    @property
    def q_flow(self) -> np.ndarray:
        return self.q_from

    def losses_mw(self) -> float:
        return float(np.sum(self.p_from + self.p_to))


# ---------------------------------------------------------------------------
# case files
# ---------------------------------------------------------------------------

_BUS_COLS = ("id", "kind", "base_kv", "p_load", "q_load", "p_gen", "v_setpoint", "g_shunt", "b_shunt")
_BRANCH_COLS = ("from", "to", "r", "x", "b_shunt", "rating_mva", "tap", "in_service")


def _num(tok: str, lineno: int, what: str) -> float:
    try:
        val = float(tok)
    except ValueError:
        raise CaseParseError(f"bad number {tok!r} for {what}", lineno) from None
    if not math.isfinite(val):
        raise CaseParseError(f"non-finite value for {what}", lineno)
    return val


def parse_case(text: str) -> GridCase:
    section = None
    meta: dict[str, float] = {}
    buses: list[Bus] = []
    branches: list[Branch] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise CaseParseError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip().lower()
            if section not in ("case", "bus", "branch"):
                raise CaseParseError(f"unknown section [{section}]", lineno)
            continue
        toks = line.split()
        if section is None:
            raise CaseParseError("data outside of a section", lineno)
        if section == "case":
            if len(toks) != 2:
                raise CaseParseError("expected 'key value'", lineno)
            meta[toks[0]] = _num(toks[1], lineno, toks[0])
        elif section == "bus":
            if len(toks) != len(_BUS_COLS):
                raise CaseParseError(f"bus row needs {len(_BUS_COLS)} columns, got {len(toks)}", lineno)
            try:
                kind = BusKind(toks[1].lower())
            except ValueError:
                raise CaseParseError(f"bad bus kind {toks[1]!r}", lineno) from None
            vals = [_num(t, lineno, c) for t, c in zip(toks[2:], _BUS_COLS[2:])]
            bus_id = _num(toks[0], lineno, "id")
            if bus_id != int(bus_id):
                raise CaseParseError("bus id must be an integer", lineno)
            buses.append(Bus(int(bus_id), kind, *vals))
        else:
            if len(toks) != len(_BRANCH_COLS):
                raise CaseParseError(
                    f"branch row needs {len(_BRANCH_COLS)} columns, got {len(toks)}", lineno
                )
            vals = [_num(t, lineno, c) for t, c in zip(toks, _BRANCH_COLS)]
            branches.append(
                Branch(int(vals[0]), int(vals[1]), vals[2], vals[3], vals[4], vals[5],
                       vals[6] if vals[6] != 0 else 1.0, bool(int(vals[7])))
            )
    if not buses:
        raise CaseParseError("no [bus] rows found")
    unknown = set(meta) - {"s_base", "f_nominal"}
    if unknown:
        raise CaseParseError(f"unknown [case] keys: {sorted(unknown)}")
    case = GridCase(tuple(buses), tuple(branches), meta.get("s_base", 100.0), meta.get("f_nominal", 60.0))
    validate_case(case)
    return case


def validate_case(case: GridCase) -> None:
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("bus ids must be unique")
    n_slack = sum(b.kind is BusKind.SLACK for b in case.buses)
    if n_slack != 1:
        raise CaseValidationError(f"exactly one slack bus required, found {n_slack}")
    for b in case.buses:
        if not b.base_kv > 0:
            raise CaseValidationError(f"bus {b.id}: base_kv must be > 0")
        if b.kind is not BusKind.PQ and not b.v_setpoint > 0:
            raise CaseValidationError(f"bus {b.id}: v_setpoint must be > 0")
    known = set(ids)
    for k, br in enumerate(case.branches):
        if br.from_bus not in known or br.to_bus not in known:
            raise CaseValidationError(f"branch {k}: endpoint references a missing bus")
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {k}: from_bus equals to_bus")
        if br.r == 0 and br.x == 0:
            raise CaseValidationError(f"branch {k}: zero impedance")
        if not br.tap > 0:
            raise CaseValidationError(f"branch {k}: tap must be > 0")
    if not case.s_base > 0:
        raise CaseValidationError("s_base must be > 0")


def format_case(case: GridCase) -> str:
    """Inverse of :func:`parse_case` (floats written with ``repr`` so they round-trip)."""
    out = ["[case]", f"s_base {case.s_base!r}", f"f_nominal {case.f_nominal!r}", "", "[bus]",
           "# " + " ".join(_BUS_COLS)]
    for b in case.buses:
        out.append(" ".join([str(b.id), b.kind.value] + [repr(float(getattr(b, c))) for c in _BUS_COLS[2:]]))
    out += ["", "[branch]", "# " + " ".join(_BRANCH_COLS)]
    for br in case.branches:
        out.append(" ".join([str(br.from_bus), str(br.to_bus)]
                            + [repr(float(v)) for v in (br.r, br.x, br.b_shunt, br.rating_mva, br.tap)]
                            + [str(int(br.in_service))]))
    return "\n".join(out) + "\n"


def load_case(path: str | Path | None = None) -> GridCase:
    """Read a case file; ``None`` returns the embedded IEEE 14-bus case."""
    if path is None:
        text = resources.files("gridgame").joinpath("data/ieee14.case").read_text()
    else:
        text = Path(path).read_text()
    return parse_case(text)


def ieee14() -> GridCase:
    return load_case(None)


# ---------------------------------------------------------------------------
# network equations
# ---------------------------------------------------------------------------

def build_ybus(case: GridCase) -> np.ndarray:
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if not br.in_service:
            continue
        f, t = case.index(br.from_bus), case.index(br.to_bus)
        y = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_shunt
        a = br.tap
        Y[f, f] += (y + ysh) / (a * a)
        Y[t, t] += y + ysh
        Y[f, t] -= y / a
        Y[t, f] -= y / a
    for k, b in enumerate(case.buses):
        Y[k, k] += complex(b.g_shunt, b.b_shunt) / case.s_base
    return Y


def build_admittance(case: GridCase) -> tuple[np.ndarray, np.ndarray]:
    """Return (G, B): real and imaginary parts of the bus admittance matrix (pu)."""
    Y = build_ybus(case)
    return Y.real.copy(), Y.imag.copy()


def energized_mask(case: GridCase) -> np.ndarray:
    """Buses connected to the slack through in-service branches."""
    n = case.n_bus
    adj: list[list[int]] = [[] for _ in range(n)]
    for br in case.branches:
        if br.in_service:
            f, t = case.index(br.from_bus), case.index(br.to_bus)
            adj[f].append(t)
            adj[t].append(f)
    seen = np.zeros(n, dtype=bool)
    stack = [case.slack_index]
    seen[stack[0]] = True
    while stack:
        k = stack.pop()
        for m in adj[k]:
            if not seen[m]:
                seen[m] = True
                stack.append(m)
    return seen


def _injections(Y: np.ndarray, V: np.ndarray) -> np.ndarray:
    return V * np.conj(Y @ V)


def _jacobian(Y: np.ndarray, V: np.ndarray):
    Ibus = Y @ V
    diagV = np.diag(V)
    dS_dVa = 1j * diagV @ np.conj(np.diag(Ibus) - Y @ diagV)
    Vn = V / np.abs(V)
    dS_dVm = diagV @ np.conj(Y @ np.diag(Vn)) + np.conj(np.diag(Ibus)) @ np.diag(Vn)
    return dS_dVa, dS_dVm


def solve_power_flow(case: GridCase, flat_start: bool = True, *, tol: float = PF_TOL,
                     max_iter: int = PF_MAX_ITER, init: PowerFlowSolution | None = None,
                     ybus: np.ndarray | None = None) -> PowerFlowSolution:
    """Polar Newton-Raphson power flow.

    Non-convergence is reported through ``converged=False`` rather than raised:
    the simulation treats it as a collapse signal. Buses islanded from the slack
    are left de-energized (``v_mag = 0``) and excluded from the solve.
    ``init`` warm-starts from a previous solution when ``flat_start`` is false.
    """
    n = case.n_bus
    sb = case.s_base
    live = energized_mask(case)
    Yfull = build_ybus(case) if ybus is None else ybus
    kinds = [b.kind for b in case.buses]
    idx_live = np.flatnonzero(live)
    Y = Yfull[np.ix_(idx_live, idx_live)]

    p_sched = np.array([(b.p_gen - b.p_load) / sb for b in case.buses])[idx_live]
    q_sched = np.array([-b.q_load / sb for b in case.buses])[idx_live]
    kinds_live = [kinds[k] for k in idx_live]
    pv = [i for i, k in enumerate(kinds_live) if k is BusKind.PV]
    pq = [i for i, k in enumerate(kinds_live) if k is BusKind.PQ]
    pvpq = sorted(pv + pq)

    vset = np.array([case.buses[k].v_setpoint for k in idx_live])
    vm = np.where([k is BusKind.PQ for k in kinds_live], 1.0, vset)
    va = np.zeros(len(idx_live))
    if not flat_start and init is not None and init.converged:
        va = init.v_ang[idx_live].copy()
        prev = init.v_mag[idx_live]
        vm = np.where([k is BusKind.PQ for k in kinds_live], np.where(prev > 0, prev, 1.0), vset)

    V = vm * np.exp(1j * va)
    converged = False
    it = 0
    mis_norm = math.inf
    npvpq = len(pvpq)
    for it in range(max_iter + 1):
        S = _injections(Y, V)
        mis = np.concatenate([(S.real - p_sched)[pvpq], (S.imag - q_sched)[pq]])
        mis_norm = float(np.max(np.abs(mis))) if mis.size else 0.0
        if not math.isfinite(mis_norm):
            break
        if mis_norm <= tol:
            converged = True
            break
        if it == max_iter:
            break
        dS_dVa, dS_dVm = _jacobian(Y, V)
        J = np.block([
            [dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]],
            [dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(J, -mis)
        except np.linalg.LinAlgError:
            break
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        if np.any(vm[pq] <= 0):
            break
        V = vm * np.exp(1j * va)

    v_mag = np.zeros(n)
    v_ang = np.zeros(n)
    v_mag[idx_live] = np.abs(V)
    v_ang[idx_live] = np.angle(V)
    return _finish(case, Yfull, v_mag, v_ang, live, converged, it, mis_norm)


def _finish(case, Y, v_mag, v_ang, live, converged, iterations, mis_norm) -> PowerFlowSolution:
    sb = case.s_base
    V = v_mag * np.exp(1j * v_ang)
    nb = len(case.branches)
    p_from, q_from, p_to, q_to = (np.zeros(nb) for _ in range(4))
    for k, br in enumerate(case.branches):
        if not br.in_service:
            continue
        f, t = case.index(br.from_bus), case.index(br.to_bus)
        y = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_shunt
        a = br.tap
        i_f = V[f] * (y + ysh) / (a * a) - V[t] * y / a
        i_t = V[t] * (y + ysh) - V[f] * y / a
        s_f = V[f] * np.conj(i_f) * sb
        s_t = V[t] * np.conj(i_t) * sb
        p_from[k], q_from[k], p_to[k], q_to[k] = s_f.real, s_f.imag, s_t.real, s_t.imag
    S = V * np.conj(Y @ V) * sb
    p_load = np.array([b.p_load for b in case.buses]) * live
    q_load = np.array([b.q_load for b in case.buses]) * live
    p_gen = np.where(live, S.real + p_load, 0.0)
    q_gen = np.where(live, S.imag + q_load, 0.0)
    return PowerFlowSolution(v_mag, v_ang, p_from, q_from, p_to, q_to, p_gen, q_gen,
                             live, converged, iterations, mis_norm)


def apply_load_delta(case: GridCase, bus: int, delta_p: float, delta_q: float = 0.0) -> GridCase:
    """Return a copy of ``case`` with extra demand at a load bus (MW, MVAr)."""
    k = case.index(bus)
    b = case.buses[k]
    if b.kind is not BusKind.PQ:
        raise ValueError(f"bus {bus} is a {b.kind.value} bus; load deltas apply to pq buses only")
    buses = list(case.buses)
    buses[k] = dataclasses.replace(b, p_load=b.p_load + delta_p, q_load=b.q_load + delta_q)
    return case.with_buses(buses)


def bus_kv(sol: PowerFlowSolution, case: GridCase) -> np.ndarray:
    return sol.v_mag * np.array([b.base_kv for b in case.buses])
