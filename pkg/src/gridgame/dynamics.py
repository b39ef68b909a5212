"""Quasi-static grid simulation: frequency/AGC, load restoration, protection.

Each control step re-solves the power flow once. Thermal, load-restoration
and frequency states advance in ``dt_physics`` substeps in between.

Loads at pq buses are served through an admittance that recovers towards
the demanded power with time constant ``restore_tau`` (aggregate tap-changer
and thermostatic recovery). Near the nose of the PV curve this recovery is
what turns a small demand increase into a voltage collapse over tens of
seconds instead of instantly.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import protection as prot
from .grid import BusKind, GridCase, PowerFlowSolution, build_ybus, ieee14, solve_power_flow
from .loads import (AmbientProfile, CoolingLoad, HvacParams, HvacState, NoiseSpec,
                    aggregate_demand, run_hvac, set_attack)
from .stability import FvsiReport, fvsi_report

BLACKOUT_V = 0.5  # pu


class StepAfterBlackout(RuntimeError):
    pass


@dataclass(frozen=True)
class GenModel:
    """Aggregate swing equation with droop and integral AGC (system base).

    p_mech = p_agc - agc_kp * df, and d(p_agc)/dt = -agc_ki * df.
    """

    h_inertia: float = 10.0  # s
    d_damping: float = 1.0  # pu/Hz
    agc_kp: float = 10.0  # pu/Hz, the slack is a tie to a stiff interconnection
    agc_ki: float = 1.0  # pu/(Hz s)
    p_agc: float = 0.0  # pu
    f_nominal: float = 60.0

    def __post_init__(self):
        if not self.h_inertia > 0:
            raise ValueError("h_inertia must be positive")
        if min(self.d_damping, self.agc_kp, self.agc_ki) < 0:
            raise ValueError("gains must be non-negative")


def step_frequency(gen: GenModel, p_imbalance: float, freq: float, dt: float) -> tuple[float, GenModel]:
    """One explicit step. ``p_imbalance`` is extra load in pu (positive = deficit)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    df = freq - gen.f_nominal
    p_mech = gen.p_agc - gen.agc_kp * df
    dfdt = gen.f_nominal / (2.0 * gen.h_inertia) * (p_mech - p_imbalance - gen.d_damping * df)
    p_agc = gen.p_agc - gen.agc_ki * df * dt
    new_f = freq + dfdt * dt
    if p_agc == gen.p_agc:
        return new_f, gen
    return new_f, dataclasses.replace(gen, p_agc=p_agc)


def run_frequency(gen: GenModel, p_imbalance: float, freq: float, dt: float, n: int
                  ) -> tuple[float, GenModel]:
    """``n`` repeated calls of ``step_frequency`` with float-only bookkeeping."""
    f0, kp, ki, dd = gen.f_nominal, gen.agc_kp, gen.agc_ki, gen.d_damping
    c = f0 / (2.0 * gen.h_inertia)
    p_agc = gen.p_agc
    for _ in range(n):
        df = freq - f0
        dfdt = c * (p_agc - kp * df - p_imbalance - dd * df)
        p_agc -= ki * df * dt
        freq += dfdt * dt
    return freq, (gen if p_agc == gen.p_agc else dataclasses.replace(gen, p_agc=p_agc))


@dataclass(frozen=True)
class Scenario:
    case: GridCase
    hvacs: tuple[HvacParams, ...] = ()
    hvac_t0: tuple[float, ...] = ()
    cooling: tuple[CoolingLoad, ...] = ()
    ambient: AmbientProfile = field(default_factory=lambda: AmbientProfile((25.0,), 1.0))
    gen: GenModel = field(default_factory=GenModel)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    attacked_bus: int = 3
    restore_tau: float = 2.0  # s
    dt_physics: float = 0.01
    dt_control: float = 1.0
    trip_mode: str = "shed"  # "shed": relay drops the bus load; "lines": opens incident branches
    load_scale: float = 1.0  # multiplies every demand (initial-condition randomization)

    def __post_init__(self):
        if len(self.hvac_t0) != len(self.hvacs):
            raise ValueError("one initial temperature per HVAC")
        if self.trip_mode not in ("shed", "lines"):
            raise ValueError("trip_mode must be 'shed' or 'lines'")
        n = self.dt_control / self.dt_physics
        if self.dt_physics <= 0 or abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ValueError("dt_control must be a positive multiple of dt_physics")
        if not self.restore_tau > self.dt_physics:
            raise ValueError("restore_tau must exceed dt_physics")
        if not any(h.bus == self.attacked_bus for h in self.hvacs):
            raise ValueError("the attacked bus needs an HVAC")

    @property
    def substeps(self) -> int:
        return int(round(self.dt_control / self.dt_physics))

    def randomized(self, rng: np.random.Generator, load_jitter: float = 0.0005,
                   ambient_jitter: float = 0.02, temp_jitter: float = 0.5) -> "Scenario":
        """Small perturbation of the initial state: load level, weather, room temperatures."""
        return dataclasses.replace(
            self,
            load_scale=self.load_scale * (1.0 + rng.uniform(-load_jitter, load_jitter)),
            ambient=self.ambient.shifted(float(rng.uniform(-ambient_jitter, ambient_jitter))),
            hvac_t0=tuple(t + float(rng.uniform(-temp_jitter, temp_jitter)) for t in self.hvac_t0),
        )


def stressed_ieee14(noise: NoiseSpec | None = None, *, shunt_mvar: float = 240.0,
                    cooling_mw_per_c: float = 37.7, base_c: float = 34.0, peak_c: float = 36.0,
                    fall_s: float = 1200.0,
                    **overrides) -> Scenario:
    """IEEE 14-bus at a hot-day peak with bus 3 close to its loadability limit.

    Bus 3 carries a capacitor bank, an aggregate air-conditioning load that
    follows the outdoor temperature and one large HVAC unit that is the
    attack surface. The outdoor temperature peaks at minute 2 and then
    stays high for the rest of the episode.
    """
    base = ieee14()
    buses = [dataclasses.replace(b, b_shunt=b.b_shunt + shunt_mvar) if b.id == 3 else b for b in base.buses]
    case = base.with_buses(buses)
    kw = dict(
        case=case,
        hvacs=(HvacParams(bus=3, r_thermal=1.0, c_thermal=60.0, setpoint=24.0, deadband=0.5,
                          p_rated=8.0, q_factor=0.2, k_gain=2.0),),
        hvac_t0=(25.0,),
        cooling=(CoolingLoad(bus=3, mw_per_c=cooling_mw_per_c, balance_c=28.0, q_factor=0.2),),
        ambient=AmbientProfile.peak_hump(base_c=base_c, peak_c=peak_c, peak_time=120.0, rise=60.0,
                                         fall=fall_s, duration=3600.0),
        noise=noise or NoiseSpec(),
        restore_tau=2.0,
    )
    kw.update(overrides)
    return Scenario(**kw)


@dataclass(frozen=True)
class TraceRecord:
    t: float
    freq: float
    v_mag: tuple[float, ...]
    attacked_bus: int
    delta_t_attack: float
    v_lower: float
    f_payoff: float = math.nan
    events: tuple[prot.ProtectionEvent, ...] = ()


@dataclass
class SimState:
    scenario: Scenario
    t: float
    case: GridCase
    hvacs: tuple[HvacState, ...]
    sol: PowerFlowSolution
    freq: float
    gen: GenModel
    relays: tuple[prot.VoltageRelay, ...]
    freq_relays: tuple[prot.FreqRelay, ...]
    fvsi: FvsiReport
    blackout: bool
    prev_v: np.ndarray
    g_load: np.ndarray  # pu conductance serving each bus load
    b_load: np.ndarray  # pu susceptance consumed by each bus load (inductive > 0)
    shed: np.ndarray  # bool per bus
    p_slack_ref: float  # MW, slack output at t = 0
    p_demand: np.ndarray = None  # MW per bus
    q_demand: np.ndarray = None
    events: tuple[prot.ProtectionEvent, ...] = ()
    record: TraceRecord | None = None

    @property
    def attacked_index(self) -> int:
        return self.case.index(self.scenario.attacked_bus)

    @property
    def v_lower(self) -> float:
        return self.relays[0].v_lower if self.relays else prot.V_LOWER_DEFAULT

    @property
    def p_served(self) -> np.ndarray:
        return self.g_load * self.sol.v_mag ** 2 * self.case.s_base

    @property
    def q_served(self) -> np.ndarray:
        return self.b_load * self.sol.v_mag ** 2 * self.case.s_base


def _pq_mask(case: GridCase) -> np.ndarray:
    return np.array([b.kind is BusKind.PQ for b in case.buses])


def _network(case: GridCase, pq: np.ndarray, shed: np.ndarray | None = None) -> GridCase:
    """Case with pq-bus loads removed; they are added to the Ybus diagonal instead.

    A shed bus also loses its shunt bank, which sits on the same feeder.
    """
    buses = []
    for k, (b, m) in enumerate(zip(case.buses, pq)):
        if shed is not None and shed[k]:
            b = dataclasses.replace(b, p_load=0.0, q_load=0.0, g_shunt=0.0, b_shunt=0.0)
        elif m:
            b = dataclasses.replace(b, p_load=0.0, q_load=0.0)
        buses.append(b)
    return case.with_buses(buses)


def _demand(sc: Scenario, case: GridCase, hvacs, t: float) -> tuple[np.ndarray, np.ndarray]:
    p, q = aggregate_demand(list(zip(sc.hvacs, hvacs)), case, sc.noise, t,
                            sc.cooling, sc.ambient.at(t))
    p = np.maximum(p * sc.load_scale, 0.0)
    return p, q * sc.load_scale


def _solve(net: GridCase, ybus: np.ndarray, pq: np.ndarray, g: np.ndarray, b: np.ndarray,
           init: PowerFlowSolution | None) -> PowerFlowSolution:
    Y = ybus + np.diag(np.where(pq, g - 1j * b, 0.0))
    sol = solve_power_flow(net, flat_start=init is None, init=init, ybus=Y)
    if init is not None and not _plausible(sol):
        # a warm start from a sagging state can slide into the trivial V = 0
        # root of a zero-injection bus; a flat start finds the physical one
        sol = solve_power_flow(net, flat_start=True, ybus=Y)
    return sol


def _plausible(sol: PowerFlowSolution) -> bool:
    return sol.converged and not np.any(sol.energized & (sol.v_mag < 1e-3))


def init_sim(sc: Scenario, relays: Sequence[prot.VoltageRelay] | None = None) -> SimState:
    """Steady state at t = 0: admittances settled so every load is fully served."""
    case = sc.case
    pq = _pq_mask(case)
    hv = tuple(HvacState(t0, True) for t0 in sc.hvac_t0)
    hv = tuple(dataclasses.replace(s, on=s.t_inside > p.setpoint, p_draw=p.p_rated if s.t_inside > p.setpoint else 0.0)
               for s, p in zip(hv, sc.hvacs))
    p_dem, q_dem = _demand(sc, case, hv, 0.0)
    net = _network(case, pq)
    ybus = build_ybus(net)
    sb = case.s_base
    v = np.ones(case.n_bus)
    sol = None
    for _ in range(100):
        g = np.where(pq, p_dem / sb / v ** 2, 0.0)
        b = np.where(pq, q_dem / sb / v ** 2, 0.0)
        sol = _solve(net, ybus, pq, g, b, sol)
        if not sol.converged:
            raise RuntimeError("initial operating point has no power-flow solution")
        v_new = sol.v_mag
        if np.max(np.abs(v_new - v)) < 1e-12:
            break
        v = v_new
    if relays is None:
        relays = tuple(prot.VoltageRelay(bid) for bid in case.load_bus_ids())
    frelays = tuple(prot.FreqRelay(bid) for bid in case.load_bus_ids())
    q_served = b * sol.v_mag ** 2 * sb
    return SimState(
        scenario=sc, t=0.0, case=case, hvacs=hv, sol=sol, freq=sc.gen.f_nominal, gen=sc.gen,
        relays=tuple(relays), freq_relays=frelays, fvsi=fvsi_report(sol, case, 0.0, q_served),
        blackout=False, prev_v=sol.v_mag.copy(), g_load=g, b_load=b,
        shed=np.zeros(case.n_bus, dtype=bool), p_slack_ref=float(sol.p_gen[case.slack_index]),
        p_demand=p_dem, q_demand=q_dem,
    )


def detect_blackout(sol: PowerFlowSolution, case: GridCase, attacked_bus: int | None = None) -> bool:
    if not sol.converged:
        return True
    pq = _pq_mask(case)
    live = sol.energized
    if np.any(pq & live & (sol.v_mag < BLACKOUT_V)):
        return True
    if attacked_bus is not None and not live[case.index(attacked_bus)]:
        return True
    return False


def simulate_step(sim: SimState, delta_t: float = 0.0, v_lower: float | None = None,
                  dt_control: float | None = None) -> SimState:
    """Advance one control interval.

    ``delta_t`` is the attacker's sensor falsification at the attacked bus (degC).
    ``v_lower`` retunes every voltage relay (None keeps the current thresholds).
    """
    if sim.blackout:
        raise StepAfterBlackout("simulation already in blackout")
    sc = sim.scenario
    dt = sc.dt_control if dt_control is None else dt_control
    n_sub = max(1, int(round(dt / sc.dt_physics)))
    h = dt / n_sub
    t0, t1 = sim.t, sim.t + dt
    case = sim.case
    sb = case.s_base
    pq = _pq_mask(case)

    # (1) thermal update with the attack applied to the attacked bus HVAC
    amb = sc.ambient.at_many(t0 + h * np.arange(n_sub)).tolist()
    hv = tuple(run_hvac(set_attack(st, params, delta_t if params.bus == sc.attacked_bus else 0.0),
                        params, amb, h)
               for params, st in zip(sc.hvacs, sim.hvacs))

    # (2) demand, with shed buses dropped
    p_dem, q_dem = _demand(sc, case, hv, t1)
    p_dem = np.where(sim.shed, 0.0, p_dem)
    q_dem = np.where(sim.shed, 0.0, q_dem)

    # load restoration at the voltages of the last solution
    v2 = np.maximum(sim.sol.v_mag, 1e-3) ** 2
    g, b = sim.g_load.copy(), sim.b_load.copy()
    pd, qd = p_dem / sb, q_dem / sb
    # explicit Euler over the substeps, summed in closed form (v is frozen)
    decay = (1.0 - h / sc.restore_tau) ** n_sub
    g = pd / v2 + (g - pd / v2) * decay
    b = qd / v2 + (b - qd / v2) * decay
    g = np.where(pq & ~sim.shed, np.maximum(g, 0.0), 0.0)
    b = np.where(pq & ~sim.shed, b, 0.0)

    # (3) power flow
    net = _network(case, pq, sim.shed)
    sol = _solve(net, build_ybus(net), pq, g, b, sim.sol)
    blackout = not sol.converged

    freq, gen = sim.freq, sim.gen
    fvsi = sim.fvsi
    relays, frelays = list(sim.relays), list(sim.freq_relays)
    new_events: list[prot.ProtectionEvent] = []
    shed = sim.shed.copy()
    if v_lower is not None:
        relays = [prot.set_thresholds(r, v_lower, r.alpha) for r in relays]

    if not blackout:
        # (4) frequency from the extra power the slack had to pick up
        p_imb = (sol.p_gen[case.slack_index] - sim.p_slack_ref) / sb
        freq, gen = run_frequency(gen, p_imb, freq, h, n_sub)
        # (5) stability index on the served reactive demand
        q_served = b * sol.v_mag ** 2 * sb
        fvsi = fvsi_report(sol, case, t1, q_served)
        # (6) protection
        branches = list(case.branches)
        for i, r in enumerate(relays):
            k = case.index(r.bus)
            if not sol.energized[k]:
                continue
            relays[i], ev = prot.step_voltage_relay(r, float(sol.v_mag[k]), dt, t1)
            if ev is not None:
                new_events.append(ev)
                if sc.trip_mode == "shed":
                    shed[k] = True
                else:
                    branches = [dataclasses.replace(br, in_service=False)
                                if r.bus in (br.from_bus, br.to_bus) else br for br in branches]
        for i, r in enumerate(frelays):
            frelays[i], ev = prot.step_freq_relay(r, freq, dt, t1)
            if ev is not None:
                new_events.append(ev)
                shed[case.index(r.bus)] = True
        if any(not a.in_service for a in branches) and tuple(branches) != case.branches:
            case = case.with_branches(branches)
        g = np.where(shed, 0.0, g)
        b = np.where(shed, 0.0, b)
        if new_events:
            # resolve the post-switching operating point
            net = _network(case, pq, shed)
            sol = _solve(net, build_ybus(net), pq, g, b, sol)
        # (7) blackout check
        blackout = detect_blackout(sol, case, sc.attacked_bus)

    events = sim.events + tuple(new_events)
    rec = TraceRecord(t1, freq, tuple(float(x) for x in sol.v_mag), sc.attacked_bus,
                      float(hv[[p.bus for p in sc.hvacs].index(sc.attacked_bus)].delta_t_attack),
                      relays[0].v_lower if relays else prot.V_LOWER_DEFAULT, math.nan,
                      tuple(new_events))
    return SimState(
        scenario=sc, t=t1, case=case, hvacs=hv, sol=sol, freq=freq, gen=gen,
        relays=tuple(relays), freq_relays=tuple(frelays), fvsi=fvsi, blackout=blackout,
        prev_v=sim.sol.v_mag.copy(), g_load=g, b_load=b, shed=shed, p_slack_ref=sim.p_slack_ref,
        p_demand=p_dem, q_demand=q_dem, events=events, record=rec,
    )


TRACE_HEADER_FIXED = ("t_s", "freq_hz")


def trace_header(case: GridCase) -> list[str]:
    return (list(TRACE_HEADER_FIXED) + [f"v_{b.id}" for b in case.buses]
            + ["attacked_bus", "delta_t_c", "v_lower_pu", "f_payoff", "events"])


def trace_csv(records: Sequence[TraceRecord], case: GridCase) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trace_header(case))
    for r in records:
        ev = ";".join(f"{e.kind.value}@{e.bus}" for e in r.events)
        w.writerow([repr(float(r.t)), repr(float(r.freq))] + [repr(float(v)) for v in r.v_mag]
                   + [r.attacked_bus, repr(float(r.delta_t_attack)), repr(float(r.v_lower)),
                      repr(float(r.f_payoff)), ev])
    return buf.getvalue()
