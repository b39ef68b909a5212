"""The eight acceptance criteria, at their stated tolerances.

Each test records a one-line PASS/FAIL verdict, printed as the test runs and
again in the terminal summary.
"""

import csv
import io
import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from gridgame.agents import DdpgAgent, DqnAgent
from gridgame.cli import dispatch
from gridgame.game import DELTA_T_MAX, Observation, PayoffParams, payoff_f, rewards
from gridgame.grid import Branch, Bus, BusKind, GridCase, load_case, solve_power_flow
from gridgame.protection import (EventKind, FreqRelay, VoltageRelay, ov_delay, step_freq_relay, uv_delay)
from gridgame.training import evaluate, fpr_sweep


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print("\n" + line)
    return ok


# 1 ------------------------------------------------------------------------

def test_c1_power_flow():
    case = load_case()
    sol = solve_power_flow(case)
    t0 = time.perf_counter()
    reps = 50
    for _ in range(reps):
        solve_power_flow(case)
    ms = (time.perf_counter() - t0) / reps * 1e3

    # 2-bus lossless line, q = 0: V2^2 = (1 + sqrt(1 - 4 p^2 x^2)) / 2, sin(d) = p x / V2
    worst = 0.0
    for p, x in [(0.2, 0.1), (0.5, 0.1), (1.0, 0.2), (2.0, 0.1), (0.8, 0.3)]:
        c = GridCase((Bus(1, BusKind.SLACK, 220.0, v_setpoint=1.0), Bus(2, BusKind.PQ, 220.0, p_load=100 * p)),
                     (Branch(1, 2, 0.0, x, 0.0),))
        s = solve_power_flow(c)
        v2 = math.sqrt((1 + math.sqrt(1 - 4 * p * p * x * x)) / 2)
        d = math.asin(p * x / v2)
        worst = max(worst, abs(s.v_mag[1] - v2), abs(s.v_ang[1] + d))

    ok = sol.converged and sol.iterations <= 10 and sol.max_mismatch <= 1e-8 and worst <= 1e-8 and ms < 10
    verdict(1, ok, f"iterations={sol.iterations} mismatch={sol.max_mismatch:.2e} 2-bus err={worst:.2e} "
                   f"solve={ms:.2f} ms")
    assert ok


# 2 ------------------------------------------------------------------------

def test_c2_relay_formulas():
    e_uv = abs(uv_delay(0.9 * 0.8, 0.8) - 5.0)
    e_ov = abs(ov_delay(1.25 * 1.3, 1.3) - 2.0)
    dt = 0.01
    times = {}
    for f, kind in [(59.4, EventKind.UFLS_SHED), (60.6, EventKind.OFLS_SHED)]:
        relay = FreqRelay(4)
        for k in range(60000):
            relay, ev = step_freq_relay(relay, f, dt, (k + 1) * dt)
            if ev:
                assert ev.kind is kind
                times[kind] = ev.time
                break
    ok = (e_uv <= 1e-12 and e_ov <= 1e-12 and len(times) == 2
          and all(abs(t - 540.0) <= dt for t in times.values()))
    verdict(2, ok, f"uv err={e_uv:.1e} ov err={e_ov:.1e} shed at "
                   + ", ".join(f"{k.value}={t:.2f}s" for k, t in times.items()))
    assert ok


# 3 ------------------------------------------------------------------------

def test_c3_payoff_fidelity():
    quiescent = Observation(0.5, 1.0, -0.1, 0.8, 0.2, 0.0)
    f = payoff_f(quiescent, 0.0, 0.8, PayoffParams())
    rng = np.random.default_rng(3)
    fs = np.concatenate([rng.normal(0, 10, 50_000), rng.uniform(-1e6, 1e6, 50_000)])
    nonzero = sum(a + b != 0.0 for a, b in map(rewards, fs.tolist()))
    ok = abs(f - 0.4890) <= 1e-4 and nonzero == 0
    verdict(3, ok, f"quiescent f={f:.5f} vs 0.4890 (|diff|={abs(f - 0.4890):.2e}); "
                   f"zero-sum violations {nonzero}/100000")
    assert ok


# 4 ------------------------------------------------------------------------

def test_c4_curvature_premises():
    p = PayoffParams()
    vs = np.linspace(0.5, 1.5, 100)

    def f(v, dt, vl):
        return payoff_f(Observation(0.5, v, -0.1, vl, 0.2, 0.0), dt, vl, p)

    dts = np.linspace(0.0, DELTA_T_MAX, 100)
    concave_bad = 0
    for vl in (0.8, 1.0, 1.3):
        for v in vs:
            y = np.array([f(v, x, vl) for x in dts])
            concave_bad += int(np.sum(y[2:] - 2 * y[1:-1] + y[:-2] > 1e-9))

    us = np.linspace(0.8 * p.alpha, 1.3 * p.alpha, 100)
    convex_bad = 0
    for v in vs:
        y = np.array([f(v, 0.0, u / p.alpha) for u in us])
        convex_bad += int(np.sum(y[2:] - 2 * y[1:-1] + y[:-2] < -1e-9))

    ok = concave_bad == 0 and convex_bad == 0
    verdict(4, ok, f"concave in dT: {concave_bad} violations; convex in v_upper: {convex_bad} violations "
                   f"of 9800 second differences")
    assert ok


# 5 ------------------------------------------------------------------------

def _fd_errors(net, loss, analytic, h=1e-5):
    """(worst elementwise |g - fd| / max(1, |g|), normwise |g - fd| / max(|g|, |fd|))."""
    g = np.concatenate([a.reshape(-1) for a in analytic])
    fd = np.empty_like(g)
    k = 0
    for prm in net.params:
        flat = prm.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            dn = loss()
            flat[i] = old
            fd[k] = (up - dn) / (2 * h)
            k += 1
    elem = float(np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(g))))
    return elem, float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12))


def test_c5_gradients():
    rng = np.random.default_rng(5)
    errs = {"actor": [], "critic": [], "q": []}
    for pt in range(10):
        ddpg, dqn = DdpgAgent(6, seed=pt), DqnAgent(6, seed=pt)
        o = rng.normal(size=(1, 6))
        a = rng.uniform(0, DELTA_T_MAX, 1)
        y = rng.normal(size=1)
        _, g = ddpg.critic_loss_grads(o, a, y)
        errs["critic"].append(_fd_errors(ddpg.critic, lambda: ddpg.critic_loss_grads(o, a, y)[0], g))
        _, g = ddpg.actor_objective_grads(o)
        errs["actor"].append(_fd_errors(ddpg.actor, lambda: -ddpg.actor_objective_grads(o)[0], g))
        act = rng.integers(0, 11, 1).astype(float)
        _, g = dqn.loss_grads(o, act, y)
        errs["q"].append(_fd_errors(dqn.q_net, lambda: dqn.loss_grads(o, act, y)[0], g))
    worst = {k: (max(e for e, _ in v), max(n for _, n in v)) for k, v in errs.items()}
    ok = all(e < 1e-4 and n < 1e-4 for e, n in worst.values())
    verdict(5, ok, "max error elementwise/normwise "
                   + " ".join(f"{k}={e:.1e}/{n:.1e}" for k, (e, n) in worst.items()))
    assert ok


# 6 ------------------------------------------------------------------------

def test_c6_attack_efficacy(tmp_path, capsys):
    rc = dispatch(["simulate", "--out-dir", str(tmp_path), "--attack-mode", "scripted", "--delta-t", "2.0",
                   "--attack-start", "120", "--aps", "static"])
    out = capsys.readouterr().out
    rows = list(csv.DictReader(io.StringIO((tmp_path / "trace.csv").read_text())))
    freqs = [float(r["freq_hz"]) for r in rows]
    bt = float(out.split("blackout_t=")[1].split()[0]) if "blackout_t=" in out else math.inf
    ok = rc == 0 and bt - 120.0 <= 120.0 and 59.5 <= min(freqs) and max(freqs) <= 60.5
    verdict(6, ok, f"blackout at t={bt:.1f}s ({bt - 120:.1f}s after onset); "
                   f"frequency in [{min(freqs):.3f}, {max(freqs):.3f}] Hz")
    assert ok


# 7 ------------------------------------------------------------------------

@pytest.mark.slow
def test_c7_mitigation(trained):
    cfg, res, _ = trained
    static = evaluate(res.attacker, None, 10, cfg, res.r_th)
    aps = evaluate(res.attacker, res.defender, 10, cfg, res.r_th)
    clean = evaluate(None, res.defender, 10, cfg, res.r_th, attack=False)
    spurious = sum(e.trips > 0 for e in clean.episodes)
    table = fpr_sweep(res.defender, res.attacker, cfg=cfg, r_th=res.r_th)
    num, den = table.fpr
    ok = (res.seconds < 1800 and aps.blackout_rate <= 0.2 and static.blackout_rate >= 0.8
          and spurious <= 2)
    verdict(7, ok, f"train {res.seconds:.0f}s; blackouts static={static.blackout_rate * 10:.0f}/10 "
                   f"aps={aps.blackout_rate * 10:.0f}/10; spurious clean trips {spurious}/10; "
                   f"FPR {num}/{den} (reference 2/7)")
    assert ok


# 8 ------------------------------------------------------------------------

def test_c8_determinism(tmp_path, capsys):
    tiny = ["--set", "episodes=2", "--set", "steps_per_episode=80", "--set", "warmup=32", "--set", "batch=16",
            "--set", "calib_episodes=1", "--set", "hidden=8"]
    runs = {
        "powerflow": ["powerflow"],
        "fvsi": ["fvsi"],
        "simulate": ["simulate", "--steps", "300", "--attack-mode", "scripted", "--randomize", "--seed", "7",
                     "--noise-var", "0.5"],
        "train": ["train", "--quiet", *tiny],
    }
    bad = []
    for name, argv in runs.items():
        d = tmp_path / name
        assert dispatch([*argv, "--out-dir", str(d)]) == 0
    extra = {
        "evaluate": ["evaluate", "--load-policy", str(tmp_path / "train"), "--episodes", "2", "--noise-var", "0.3"],
        "fpr": ["fpr-sweep", "--load-policy", str(tmp_path / "train"), "--runs", "1", "--variances", "0.5,1.5"],
    }
    for name, argv in extra.items():
        assert dispatch([*argv, "--out-dir", str(tmp_path / name)]) == 0
    n_files = 0
    for name in [*runs, *extra]:
        d = tmp_path / name
        if dispatch(["replay", str(d / "manifest.json")]) != 0:
            bad.append(name)
        outputs = json.loads((d / "manifest.json").read_text())["outputs"]
        for f in outputs:
            n_files += 1
            if (d / f).read_bytes() != (d / "replay" / f).read_bytes():
                bad.append(f"{name}/{f}")
    ok = not bad
    verdict(8, ok, f"{len(runs) + len(extra)} runs, {n_files} outputs replayed"
                   + (f"; mismatched: {', '.join(bad)}" if bad else " byte-identical"))
    assert ok
