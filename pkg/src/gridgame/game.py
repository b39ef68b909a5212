"""Zero-sum attacker/defender game on top of the grid simulation.

The attacker (load alteration) picks a sensor falsification dT at the
attacked bus; the defender picks a common under-voltage threshold for every
voltage relay. Both see the same six-feature observation of the attacked bus.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from . import protection as prot
from .dynamics import Scenario, SimState, init_sim, simulate_step, stressed_ieee14

DEFENSE_LEVELS = tuple(round(0.80 + 0.05 * k, 2) for k in range(11))
DELTA_T_MAX = 2.5  # degC
OBS_FIELDS = ("p_flow_ij", "v_i", "theta_i", "v_lower", "fvsi_max", "dv_dt")


@dataclass(frozen=True)
class Observation:
    p_flow_ij: float  # pu, flow from the partner bus into the attacked bus
    v_i: float  # pu
    theta_i: float  # rad
    v_lower: float  # pu
    fvsi_max: float
    dv_dt: float  # pu/s

    def as_array(self) -> np.ndarray:
        return np.array([self.p_flow_ij, self.v_i, self.theta_i, self.v_lower, self.fvsi_max, self.dv_dt])


@dataclass(frozen=True)
class AttackAction:
    delta_t: float

    def __post_init__(self):
        object.__setattr__(self, "delta_t", float(min(max(self.delta_t, 0.0), DELTA_T_MAX)))


@dataclass(frozen=True)
class DefenseAction:
    index: int

    def __post_init__(self):
        if not 0 <= self.index < len(DEFENSE_LEVELS):
            raise ValueError(f"defense index {self.index} outside [0, {len(DEFENSE_LEVELS)})")

    @property
    def v_lower(self) -> float:
        return DEFENSE_LEVELS[self.index]


@dataclass(frozen=True)
class PayoffParams:
    k_gain: float = 2.0  # MW/degC
    r_th: float = 0.01  # pu/s
    alpha: float = prot.ALPHA_DEFAULT

    def __post_init__(self):
        if not self.r_th > 0:
            raise ValueError("r_th must be positive")


def _softplus_neg(x: float) -> float:
    # log(1 + exp(-x)) without overflow
    return math.log1p(math.exp(-x)) if x > -30 else -x


def payoff_f(obs: Observation, a: AttackAction | float, v_lower: float, params: PayoffParams) -> float:
    """Attacker payoff.

    log(1 + k dT) rewards extra demand, -log(1 + |dV/dt| / R_th) penalizes
    visible voltage swings, and the two gated terms reward staying inside
    the relay band: the first is dropped below v_lower, the second above
    v_upper = alpha * v_lower.
    """
    dt_ = a.delta_t if isinstance(a, AttackAction) else float(a)
    v = obs.v_i
    v_upper = params.alpha * v_lower
    f = math.log1p(params.k_gain * dt_) - math.log1p(abs(obs.dv_dt) / params.r_th)
    if v >= v_lower:
        f += _softplus_neg(v / v_lower)
    if v <= v_upper and v > 0:
        f += _softplus_neg(v_upper / v)
    return f


def rewards(f: float) -> tuple[float, float]:
    return f, -f


@dataclass
class EnvConfig:
    episode_steps: int = 1200
    attack_start: float = 120.0  # s; attacker inputs before this are ignored
    attack: bool = True  # False gives an attack-free episode
    obs_noise: float = 0.002  # Gaussian sigma, pu of nominal
    terminal_bonus: float = 300.0  # zero-sum transfer on blackout
    trip_cost: float = 10.0  # charged to the defender per voltage-relay trip
    false_trip_cost: float = 100.0  # extra, for trips while no attack is running
    alarm_cost: float = 0.5  # per relay in violation per step while no attack is running
    pure_payoff: bool = False  # True disables every shaping term above
    randomize: bool = True
    load_jitter: float = 0.0005  # relative spread of the initial demand
    ambient_jitter: float = 0.02  # degC
    temp_jitter: float = 0.5  # degC, initial indoor temperature
    voltage_relays: bool = True  # False removes under/over-voltage protection entirely
    full_state: bool = False  # append every bus voltage and angle to the observation
    payoff: PayoffParams = field(default_factory=PayoffParams)


class EpisodeDone(RuntimeError):
    pass


class Env:
    """One episode at a time; not thread-safe, create one per worker."""

    def __init__(self, scenario: Scenario | None = None, config: EnvConfig | None = None):
        self.base = scenario or stressed_ieee14()
        self.cfg = config or EnvConfig()
        self.sim: SimState | None = None
        self.done = True
        self.steps = 0
        self._rng = np.random.default_rng(0)
        self._prev_v = 0.0
        self.records = []
        self.dump: IO[str] | None = None

    @property
    def obs_dim(self) -> int:
        n = len(OBS_FIELDS)
        return n + 2 * self.base.case.n_bus if self.cfg.full_state else n

    @property
    def attacked_bus(self) -> int:
        return self.base.attacked_bus

    def attack_active(self, t: float | None = None) -> bool:
        t = self.sim.t if t is None else t
        return self.cfg.attack and t >= self.cfg.attack_start

    def reset(self, seed: int = 0) -> np.ndarray:
        """Start an episode; ``seed`` drives the initial-state draw and sensor noise."""
        ss = np.random.SeedSequence(seed)
        init_ss, obs_ss, noise_ss = ss.spawn(3)
        sc = self.base
        if sc.noise.variance_mw > 0:
            noise = dataclasses.replace(sc.noise, seed=int(noise_ss.generate_state(1)[0]))
            sc = dataclasses.replace(sc, noise=noise)
        if self.cfg.randomize:
            sc = sc.randomized(np.random.default_rng(init_ss), self.cfg.load_jitter,
                               self.cfg.ambient_jitter, self.cfg.temp_jitter)
        self.sim = init_sim(sc, None if self.cfg.voltage_relays else ())
        self._rng = np.random.default_rng(obs_ss)
        self.done = False
        self.steps = 0
        self.records = []
        k = self.sim.attacked_index
        self._prev_v = self._noisy_v(float(self.sim.sol.v_mag[k]))
        self._last_obs = self._observe(self._prev_v, 0.0)
        return self._full(self._last_obs)

    def _noisy_v(self, v: float) -> float:
        return v + self.cfg.obs_noise * self._rng.standard_normal()

    def _attacked_line(self) -> tuple[int, float]:
        """Index of the highest-FVSI in-service line ending at the attacked bus, and its FVSI."""
        bus = self.sim.scenario.attacked_bus
        best, val = -1, -1.0
        for e in self.sim.fvsi.entries:
            if bus in (e.from_bus, e.to_bus) and e.value > val:
                best, val = e.line, e.value
        if best < 0:
            for k, br in enumerate(self.sim.case.branches):
                if br.in_service and bus in (br.from_bus, br.to_bus):
                    return k, 0.0
        return best, val

    def _observe(self, v_noisy: float, dv_dt: float) -> Observation:
        sim = self.sim
        k = sim.attacked_index
        line, _ = self._attacked_line()
        p = 0.0
        if line >= 0:
            br = sim.case.branches[line]
            # positive when power flows into the attacked bus
            p = -sim.sol.p_from[line] if br.from_bus == sim.scenario.attacked_bus else -sim.sol.p_to[line]
            p /= sim.case.s_base
        p *= 1.0 + self.cfg.obs_noise * self._rng.standard_normal()
        theta = float(sim.sol.v_ang[k]) + self.cfg.obs_noise * self._rng.standard_normal()
        fmax = sim.fvsi.max_entry.value if sim.fvsi.max_entry is not None else 0.0
        return Observation(float(p), v_noisy, theta, sim.v_lower, float(fmax), dv_dt)

    def observation(self) -> Observation:
        return self._last_obs

    def _full(self, obs: Observation) -> np.ndarray:
        x = obs.as_array()
        if not self.cfg.full_state:
            return x
        return np.concatenate([x, self.sim.sol.v_mag, self.sim.sol.v_ang])

    def step(self, delta_t: float | AttackAction, defense: int | DefenseAction | None
             ) -> tuple[np.ndarray, float, float, bool, dict]:
        """Attacker moves, then the defender retunes, then the grid advances one control step.

        ``defense=None`` keeps the current thresholds (static protection).
        """
        if self.done:
            raise EpisodeDone("episode finished; call reset()")
        cfg = self.cfg
        a = delta_t if isinstance(delta_t, AttackAction) else AttackAction(delta_t)
        active = self.attack_active()
        applied = a.delta_t if active else 0.0
        v_lower = None
        if defense is not None:
            d = defense if isinstance(defense, DefenseAction) else DefenseAction(int(defense))
            v_lower = d.v_lower
        dt = self.sim.scenario.dt_control
        self.sim = simulate_step(self.sim, applied, v_lower)
        self.steps += 1
        sim = self.sim
        k = sim.attacked_index
        v_noisy = self._noisy_v(float(sim.sol.v_mag[k]))
        dv_dt = (v_noisy - self._prev_v) / dt
        self._prev_v = v_noisy
        obs = self._observe(v_noisy, dv_dt)
        self._last_obs = obs
        f = payoff_f(obs, applied, sim.v_lower, cfg.payoff)
        r_laa = f
        trips = [e for e in sim.record.events if e.kind in (prot.EventKind.UV_TRIP, prot.EventKind.OV_TRIP)]
        if not cfg.pure_payoff:
            if sim.blackout:
                r_laa += cfg.terminal_bonus
            r_laa += cfg.trip_cost * len(trips)
            if not active:
                r_laa += cfg.false_trip_cost * len(trips)
                r_laa += cfg.alarm_cost * sum(1 for r in sim.relays if not r.tripped and (r.uv_timer > 0 or r.ov_timer > 0))
        r_laa, r_avps = rewards(r_laa)
        self.done = sim.blackout or self.steps >= cfg.episode_steps
        rec = sim.record
        rec = type(rec)(rec.t, rec.freq, rec.v_mag, rec.attacked_bus, rec.delta_t_attack,
                        rec.v_lower, f, rec.events)
        self.records.append(rec)
        x = self._full(obs)
        info = {"f": f, "t": sim.t, "blackout": sim.blackout, "attack_active": active,
                "events": rec.events, "delta_t": applied}
        if self.dump is not None:
            self.dump.write(json.dumps({
                "t": sim.t, "obs": [float(v) for v in x], "delta_t": applied, "v_lower": sim.v_lower,
                "r_laa": r_laa, "r_avps": r_avps, "done": self.done,
            }) + "\n")
        return x, r_laa, r_avps, self.done, info


def calibrate_r_th(env: Env, episodes: int = 10, seed: int = 10_000, steps: int | None = None) -> float:
    """Largest |dV/dt| seen in attack-free episodes with static protection."""
    saved = env.cfg
    env.cfg = EnvConfig(**{**saved.__dict__, "attack": False,
                           "episode_steps": steps or saved.episode_steps})
    worst = 0.0
    try:
        for ep in range(episodes):
            env.reset(seed + ep)
            while not env.done:
                env.step(0.0, None)
                worst = max(worst, abs(env.observation().dv_dt))
    finally:
        env.cfg = saved
    return worst
