"""Fast Voltage Stability Index per line and most-unstable-bus selection."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .grid import GridCase, PowerFlowSolution


class DegenerateLine(ValueError):
    """FVSI is undefined for this line (zero susceptance or de-energized end)."""


@dataclass(frozen=True)
class FvsiEntry:
    line: int  # 0-based index into case.branches (CSV line_id is 1-based)
    from_bus: int
    to_bus: int
    load_bus: int
    value: float


@dataclass(frozen=True)
class FvsiReport:
    entries: tuple[FvsiEntry, ...]
    max_entry: FvsiEntry | None
    computed_at: float = 0.0


def fvsi_value(z_mag: float, g: float, b: float, q_i: float, v_i: float) -> float:
    """|4 Z^2 Q_i (B^2 + G^2) / (V_i^2 B)|, all in per-unit.

    The absolute value is taken because the series susceptance of an
    inductive line is negative while FVSI thresholds are stated on magnitude.
    """
    if b == 0.0:
        raise DegenerateLine("series susceptance is zero")
    if v_i <= 0.0:
        raise DegenerateLine("receiving-end voltage is zero")
    return abs(4.0 * z_mag * z_mag * q_i * (b * b + g * g) / (v_i * v_i * b))


def receiving_bus(sol: PowerFlowSolution, case: GridCase, branch: int) -> int:
    br = case.branches[branch]
    return br.to_bus if sol.p_from[branch] >= 0.0 else br.from_bus


def fvsi_line(sol: PowerFlowSolution, case: GridCase, branch: int, load_bus: int | None = None,
              q_demand: np.ndarray | None = None) -> float:
    """FVSI of ``branch`` seen from ``load_bus`` (default: the receiving end).

    ``q_demand`` overrides the per-bus reactive demand (MVAr) taken from the
    case; the simulator passes the demand actually served.
    """
    br = case.branches[branch]
    if not br.in_service:
        raise DegenerateLine(f"branch {branch} is out of service")
    if load_bus is None:
        load_bus = receiving_bus(sol, case, branch)
    if load_bus not in (br.from_bus, br.to_bus):
        raise ValueError(f"bus {load_bus} is not an endpoint of branch {branch}")
    k = case.index(load_bus)
    q = case.buses[k].q_load if q_demand is None else float(q_demand[k])
    g, b = br.series_admittance()
    return fvsi_value(br.z_mag, g, b, q / case.s_base, float(sol.v_mag[k]))


def fvsi_report(sol: PowerFlowSolution, case: GridCase, t: float = 0.0,
                q_demand: np.ndarray | None = None) -> FvsiReport:
    entries = []
    for k, br in enumerate(case.branches):
        if not br.in_service:
            continue
        lb = receiving_bus(sol, case, k)
        try:
            val = fvsi_line(sol, case, k, lb, q_demand)
        except DegenerateLine:
            continue
        entries.append(FvsiEntry(k, br.from_bus, br.to_bus, lb, val))
    best = _pick_max(entries) if entries else None
    return FvsiReport(tuple(entries), best, t)


def _pick_max(entries) -> FvsiEntry:
    # highest value, ties to the lowest load-bus id (then lowest line index)
    return min(entries, key=lambda e: (-e.value, e.load_bus, e.line))


def most_unstable_bus(report: FvsiReport | list[FvsiEntry]) -> tuple[int, int, float]:
    """(load bus, partner bus, FVSI) of the highest-FVSI line.

    Starts from an incumbent of 0 rather than 1, so a bus is returned even
    when the whole grid is stable.
    """
    entries = report.entries if isinstance(report, FvsiReport) else tuple(report)
    if not entries:
        raise ValueError("empty FVSI report")
    e = _pick_max(entries)
    partner = e.to_bus if e.load_bus == e.from_bus else e.from_bus
    return e.load_bus, partner, e.value


def report_csv(report: FvsiReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["line_id", "from", "to", "load_bus", "fvsi"])
    for e in report.entries:
        w.writerow([e.line + 1, e.from_bus, e.to_bus, e.load_bus, repr(e.value)])
    return buf.getvalue()
