import csv
import io

import numpy as np
import pytest

from gridgame.dynamics import (GenModel, StepAfterBlackout, detect_blackout, init_sim, run_frequency,
                               simulate_step, step_frequency, stressed_ieee14, trace_csv, trace_header)
from gridgame.grid import BusKind, solve_power_flow
from gridgame.loads import NoiseSpec
from gridgame.protection import F_LOWER, F_UPPER


def run(sc, steps, delta_t=0.0, start=1e9, v_lower=None):
    sim = init_sim(sc)
    recs = []
    for _ in range(steps):
        sim = simulate_step(sim, delta_t if sim.t >= start else 0.0, v_lower)
        recs.append(sim.record)
        if sim.blackout:
            break
    return sim, recs


@pytest.fixture(scope="module")
def clean_run():
    return run(stressed_ieee14(), 1200)


def test_frequency_fixed_point():
    f, g = step_frequency(GenModel(), 0.0, 60.0, 0.01)
    assert f == 60.0 and g.p_agc == 0.0


def test_frequency_step_recovers():
    gen, f, fmin = GenModel(), 60.0, 60.0
    for _ in range(6000):
        f, gen = step_frequency(gen, 0.04, f, 0.01)
        fmin = min(fmin, f)
    assert fmin < 60.0
    assert abs(f - 60.0) <= 0.05


def test_droop_offset_without_agc():
    gen = GenModel(d_damping=2.0, agc_kp=0.0, agc_ki=0.0)
    f, _ = run_frequency(gen, 0.1, 60.0, 0.01, 20000)
    assert f - 60.0 == pytest.approx(-0.1 / 2.0, abs=1e-9)


def test_run_frequency_matches_steps():
    g1 = g2 = GenModel()
    f1 = f2 = 60.0
    for _ in range(300):
        f1, g1 = step_frequency(g1, 0.03, f1, 0.01)
    f2, g2 = run_frequency(g2, 0.03, f2, 0.01, 300)
    assert f1 == pytest.approx(f2, abs=1e-12) and g1.p_agc == pytest.approx(g2.p_agc, abs=1e-12)


def test_blackout_detection(case14):
    sol = solve_power_flow(case14)
    assert not detect_blackout(sol, case14)
    sol.converged = False
    assert detect_blackout(sol, case14)
    sol = solve_power_flow(case14)
    sol.v_mag = sol.v_mag.copy()
    sol.v_mag[case14.index(4)] = 0.49
    assert detect_blackout(sol, case14)


def test_clean_run_is_quiet(clean_run):
    sim, recs = clean_run
    assert not sim.blackout
    assert len(recs) == 1200
    assert all(not r.events for r in recs)
    freqs = np.array([r.freq for r in recs])
    assert np.all((freqs >= F_LOWER) & (freqs <= F_UPPER))


def test_conservation_each_step():
    sc = stressed_ieee14()
    sim = init_sim(sc)
    for _ in range(150):
        sim = simulate_step(sim, 2.0 if sim.t >= 120 else 0.0)
        if sim.blackout:
            break
        other = sum(b.p_load for b in sim.case.buses if b.kind is not BusKind.PQ)
        bal = sim.sol.p_gen.sum() - sim.p_served.sum() - other - sim.sol.losses_mw()
        assert abs(bal) / sim.case.s_base < 1e-6


def test_blackout_absorbing():
    sim, _ = run(stressed_ieee14(), 600, 2.5, start=0.0)
    assert sim.blackout
    with pytest.raises(StepAfterBlackout):
        simulate_step(sim)


def test_deterministic_with_noise():
    sc = stressed_ieee14(noise=NoiseSpec(1.0, seed=5))
    _, a = run(sc, 150, 2.0, start=120.0)
    _, b = run(sc, 150, 2.0, start=120.0)
    assert trace_csv(a, sc.case) == trace_csv(b, sc.case)


def test_halving_dt_changes_little():
    a, _ = run(stressed_ieee14(), 120)
    b, _ = run(stressed_ieee14(dt_physics=0.005), 120)
    assert np.max(np.abs(a.sol.v_mag - b.sol.v_mag) / a.sol.v_mag) < 0.01


def test_high_threshold_trip_sheds_bus():
    sc = stressed_ieee14()
    sim = init_sim(sc)
    events = []
    for _ in range(400):
        sim = simulate_step(sim, 0.0, 1.3)
        events += sim.record.events
    assert events, "relays set to 1.3 pu must trip somewhere on a ~1 pu grid"
    bus = events[0].bus
    k = sim.case.index(bus)
    assert sim.shed[k] and sim.p_served[k] == 0.0


def test_lines_trip_mode_opens_branches():
    sc = stressed_ieee14(trip_mode="lines")
    sim = init_sim(sc)
    ev = None
    while ev is None:
        sim = simulate_step(sim, 0.0, 1.3)
        ev = next(iter(sim.record.events), None)
    out = [br for br in sim.case.branches if ev.bus in (br.from_bus, br.to_bus)]
    assert out and all(not br.in_service for br in out)


def test_trace_header_and_rows(clean_run):
    sim, recs = clean_run
    hdr = trace_header(sim.case)
    assert hdr[:2] == ["t_s", "freq_hz"] and hdr[2] == "v_1" and hdr[-1] == "events"
    rows = list(csv.reader(io.StringIO(trace_csv(recs[:3], sim.case))))
    assert rows[0] == hdr and len(rows) == 4 and float(rows[1][0]) == 1.0
