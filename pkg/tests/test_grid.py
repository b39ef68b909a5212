import math
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridgame.grid import (Branch, Bus, BusKind, CaseParseError, CaseValidationError, GridCase,
                           apply_load_delta, build_admittance, build_ybus, format_case, load_case,
                           parse_case, solve_power_flow, validate_case)


def two_bus(p_mw=50.0, q_mvar=0.0, r=0.0, x=0.1, b_line=0.0):
    buses = (Bus(1, BusKind.SLACK, 220.0, v_setpoint=1.0),
             Bus(2, BusKind.PQ, 220.0, p_load=p_mw, q_load=q_mvar))
    return GridCase(buses, (Branch(1, 2, r, x, b_line),))


def three_bus(p2, p3, q3):
    buses = (Bus(1, BusKind.SLACK, 220.0, v_setpoint=1.02),
             Bus(2, BusKind.PV, 220.0, p_load=p2, p_gen=40.0, v_setpoint=1.01),
             Bus(3, BusKind.PQ, 220.0, p_load=p3, q_load=q3))
    br = (Branch(1, 2, 0.02, 0.08, 0.02), Branch(2, 3, 0.03, 0.12, 0.01), Branch(1, 3, 0.01, 0.06, 0.0))
    return GridCase(buses, br)


def _injection_residual(case, sol):
    """Independent recomputation of the bus power balance from the series/shunt data."""
    n = case.n_bus
    v = sol.v_mag * np.exp(1j * sol.v_ang)
    s_inj = np.zeros(n, dtype=complex)
    for br in case.branches:
        if not br.in_service:
            continue
        i, j = case.index(br.from_bus), case.index(br.to_bus)
        y = 1.0 / complex(br.r, br.x)
        a = br.tap
        i_ij = (v[i] / a - v[j]) * y / a + v[i] * 1j * br.b_shunt / 2 / a ** 2
        i_ji = (v[j] - v[i] / a) * y + v[j] * 1j * br.b_shunt / 2
        s_inj[i] += v[i] * np.conj(i_ij)
        s_inj[j] += v[j] * np.conj(i_ji)
    sb = case.s_base
    res = []
    for k, b in enumerate(case.buses):
        shunt = (b.g_shunt - 1j * b.b_shunt) / sb * abs(v[k]) ** 2
        sched = (sol.p_gen[k] + 1j * sol.q_gen[k] - b.p_load - 1j * b.q_load) / sb
        mism = sched - s_inj[k] - shunt
        if b.kind is BusKind.PQ:
            res.append(abs(mism))
        elif b.kind is BusKind.PV:
            res.append(abs(mism.real))
    return max(res)


def test_embedded_case_counts(case14):
    assert case14.n_bus == 14
    assert len(case14.branches) == 20
    assert sum(b.kind is BusKind.SLACK for b in case14.buses) == 1


def test_two_slack_buses_rejected(case14):
    buses = list(case14.buses)
    buses[1] = Bus(2, BusKind.SLACK, 220.0)
    with pytest.raises(CaseValidationError):
        validate_case(case14.with_buses(buses))


def test_empty_file_is_parse_error():
    with pytest.raises(CaseParseError):
        parse_case("")


def test_parse_error_reports_line_number():
    text = "[bus]\n1 slack 220 0 0 0 1 0 0\n2 pq 220 x 0 0 1 0 0\n"
    with pytest.raises(CaseParseError) as exc:
        parse_case(text)
    assert exc.value.line == 3


def test_case_file_round_trip(case14, tmp_path):
    text = format_case(case14)
    assert parse_case(text) == case14
    p = tmp_path / "c.case"
    p.write_text(text)
    assert load_case(p) == case14


def test_single_branch_admittance():
    G, B = build_admittance(two_bus(r=0.0, x=0.1))
    assert G[0, 1] == 0.0
    assert B[0, 1] == pytest.approx(10.0, abs=1e-12)  # off-diagonal is -y = -1/(j0.1) = +j10
    assert B[0, 0] == pytest.approx(-10.0, abs=1e-12)


def test_all_out_of_service_gives_zero_offdiagonals(case14):
    case = case14.with_branches([Branch(b.from_bus, b.to_bus, b.r, b.x, b.b_shunt, in_service=False)
                                 for b in case14.branches])
    Y = build_ybus(case)
    assert np.all(Y[~np.eye(case.n_bus, dtype=bool)] == 0)


def test_ybus_matches_direct_formula(case14):
    Y = build_ybus(case14)
    ref = np.zeros_like(Y)
    for br in case14.branches:
        i, j = case14.index(br.from_bus), case14.index(br.to_bus)
        y = 1.0 / complex(br.r, br.x)
        a = br.tap
        ref[i, i] += y / a ** 2 + 0.5j * br.b_shunt / a ** 2
        ref[j, j] += y + 0.5j * br.b_shunt
        ref[i, j] -= y / a
        ref[j, i] -= y / a
    for k, b in enumerate(case14.buses):
        ref[k, k] += (b.g_shunt + 1j * b.b_shunt) / case14.s_base
    assert np.max(np.abs(Y - ref)) < 1e-12
    assert np.allclose(Y, Y.T, atol=0)


def test_two_bus_zero_load_is_flat():
    sol = solve_power_flow(two_bus(p_mw=0.0))
    assert sol.converged
    np.testing.assert_allclose(sol.v_mag, [1.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(sol.v_ang, [0.0, 0.0], atol=1e-12)


def test_two_bus_closed_form():
    x, p = 0.1, 0.5
    sol = solve_power_flow(two_bus(p_mw=50.0, x=x))
    v1, v2 = sol.v_mag
    d = sol.v_ang[0] - sol.v_ang[1]
    assert v1 * v2 / x * math.sin(d) == pytest.approx(p, abs=1e-8)
    # Q balance at bus 2 with zero reactive load: V2^2 = V1 V2 cos d
    assert v2 * v2 / x - v1 * v2 / x * math.cos(d) == pytest.approx(0.0, abs=1e-8)
    # closed form: with q = 0, V2^2 = (1 + sqrt(1 - 4 p^2 x^2)) / 2
    assert v2 ** 2 == pytest.approx((1 + math.sqrt(1 - 4 * p * p * x * x)) / 2, abs=1e-8)


def test_ieee14_converges_fast(case14):
    sol = solve_power_flow(case14)
    assert sol.converged and sol.iterations <= 10
    assert sol.max_mismatch <= 1e-8
    assert _injection_residual(case14, sol) <= 1e-8


def test_ieee14_reference_voltages(case14):
    # standard published solution of the case (bus 3 as a load bus changes bus 3 only slightly)
    sol = solve_power_flow(case14)
    assert sol.v_mag[0] == 1.06 and sol.v_mag[1] == pytest.approx(1.045)
    assert np.all((sol.v_mag > 0.95) & (sol.v_mag < 1.1))


def test_power_balance_and_losses(case14):
    sol = solve_power_flow(case14)
    sb = case14.s_base
    load = sum(b.p_load for b in case14.buses)
    shunt = sum(b.g_shunt * sol.v_mag[k] ** 2 for k, b in enumerate(case14.buses))
    assert (sol.p_gen.sum() - load - shunt - sol.losses_mw()) / sb == pytest.approx(0.0, abs=1e-6)
    assert np.all(sol.p_from + sol.p_to >= -1e-9)


def test_deterministic(case14):
    a, b = solve_power_flow(case14), solve_power_flow(case14)
    assert np.array_equal(a.v_mag, b.v_mag) and np.array_equal(a.v_ang, b.v_ang)


def test_runtime_under_10ms(case14):
    solve_power_flow(case14)
    n = 50
    t = time.perf_counter()
    for _ in range(n):
        solve_power_flow(case14)
    assert (time.perf_counter() - t) / n < 0.010


def test_islanded_bus_deenergized(case14):
    # bus 8 hangs off bus 7 through a single branch
    brs = [Branch(b.from_bus, b.to_bus, b.r, b.x, b.b_shunt, b.rating_mva, b.tap,
                  not {b.from_bus, b.to_bus} == {7, 8}) for b in case14.branches]
    sol = solve_power_flow(case14.with_branches(brs))
    assert sol.converged
    assert sol.v_mag[case14.index(8)] == 0.0


def test_load_delta(case14):
    assert apply_load_delta(case14, 3, 0.0) == case14
    base = solve_power_flow(case14)
    new = apply_load_delta(case14, 3, 4.0)
    assert case14.bus(3).p_load == 94.2
    sol = solve_power_flow(new)
    k = case14.index(3)
    assert sol.v_mag[k] < base.v_mag[k]
    assert not np.allclose(sol.p_from, base.p_from)
    with pytest.raises(ValueError):
        apply_load_delta(case14, 1, 4.0)


def _grid_search_two_bus(p, q, x, r):
    """Coarse-to-fine search over (V2, theta2) minimising the mismatch."""
    y = 1 / complex(r, x)
    def mism(v, th):
        v2 = v * np.exp(1j * th)
        s = v2 * np.conj((v2 - 1.0) * y)
        return np.abs(s + complex(p, q))
    v_lo, v_hi, t_lo, t_hi = 0.7, 1.2, -0.8, 0.1
    for _ in range(12):
        vv, tt = np.meshgrid(np.linspace(v_lo, v_hi, 41), np.linspace(t_lo, t_hi, 41))
        m = mism(vv, tt)
        i = np.unravel_index(np.argmin(m), m.shape)
        v0, t0 = vv[i], tt[i]
        dv, dt = (v_hi - v_lo) / 10, (t_hi - t_lo) / 10
        v_lo, v_hi, t_lo, t_hi = v0 - dv, v0 + dv, t0 - dt, t0 + dt
    return v0, t0


@given(p=st.floats(0.0, 60.0), q=st.floats(-10.0, 20.0), x=st.floats(0.05, 0.2), r=st.floats(0.0, 0.05))
def test_two_bus_matches_grid_search(p, q, x, r):
    sol = solve_power_flow(two_bus(p, q, r, x))
    assert sol.converged
    v, th = _grid_search_two_bus(p / 100, q / 100, x, r)
    assert sol.v_mag[1] == pytest.approx(v, abs=1e-6)
    assert sol.v_ang[1] == pytest.approx(th, abs=1e-6)


@given(p2=st.floats(0.0, 40.0), p3=st.floats(0.0, 80.0), q3=st.floats(0.0, 30.0))
def test_three_bus_residual_and_losses(p2, p3, q3):
    case = three_bus(p2, p3, q3)
    sol = solve_power_flow(case)
    assert sol.converged
    assert _injection_residual(case, sol) <= 1e-8
    assert np.all(sol.p_from + sol.p_to >= -1e-9)


def _grid_search_three_bus(case):
    Y = build_ybus(case)
    sb = case.s_base
    v1, v2 = case.buses[0].v_setpoint, case.buses[1].v_setpoint
    p2 = (case.buses[1].p_gen - case.buses[1].p_load) / sb
    s3 = -(case.buses[2].p_load + 1j * case.buses[2].q_load) / sb

    def mism(t2, v3, t3):
        V = np.stack([np.full_like(t2, v1, dtype=complex), v2 * np.exp(1j * t2), v3 * np.exp(1j * t3)])
        I = np.tensordot(Y, V, axes=1)
        S = V * np.conj(I)
        return np.abs(S[1].real - p2) + np.abs(S[2] - s3)

    lo, hi = np.array([-0.5, 0.8, -0.5]), np.array([0.5, 1.2, 0.5])
    for _ in range(20):
        axes = [np.linspace(a, b, 21) for a, b in zip(lo, hi)]
        g = np.meshgrid(*axes, indexing="ij")
        m = mism(*g)
        i = np.unravel_index(np.argmin(m), m.shape)
        best = np.array([g[0][i], g[1][i], g[2][i]])
        span = (hi - lo) / 8
        lo, hi = best - span, best + span
    return best


@pytest.mark.parametrize("p2,p3,q3", [(10.0, 60.0, 20.0), (0.0, 30.0, 5.0), (30.0, 80.0, 25.0)])
def test_three_bus_matches_grid_search(p2, p3, q3):
    case = three_bus(p2, p3, q3)
    sol = solve_power_flow(case)
    t2, v3, t3 = _grid_search_three_bus(case)
    assert sol.v_ang[1] == pytest.approx(t2, abs=1e-6)
    assert sol.v_mag[2] == pytest.approx(v3, abs=1e-6)
    assert sol.v_ang[2] == pytest.approx(t3, abs=1e-6)
