"""Competitive training loop, frozen-policy evaluation and the noise/FPR sweep."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .agents import DdpgAgent, DdpgConfig, DqnAgent, DqnConfig, ReplayBuffer, Transition
from .dynamics import Scenario, stressed_ieee14
from .game import DEFENSE_LEVELS, DELTA_T_MAX, Env, EnvConfig, PayoffParams, calibrate_r_th
from .loads import NoiseSpec
from .protection import EventKind

# Episode seeds live in disjoint integer ranges: training < 2**40 <= evaluation < 2**41 <= calibration.
MAX_EPISODES = 1_000_000
EVAL_SEED_OFFSET = 2 ** 40
CALIB_SEED_OFFSET = 2 ** 41
FPR_VARIANCES = (0.1, 0.3, 0.5, 1.0, 1.5, 1.6, 1.7)


@dataclass
class TrainConfig:
    episodes: int = 60
    steps_per_episode: int = 1200  # L
    control_dt: float = 1.0  # s
    physics_dt: float = 0.01  # s
    gamma: float = 0.99
    seed: int = 0
    # initial-state draw (mu0)
    load_jitter: float = 0.0005  # relative
    ambient_jitter: float = 0.02  # degC
    temp_jitter: float = 0.5  # degC
    noise_var: float = 0.0  # MW^2, load-profile noise
    obs_noise: float = 0.002
    # episode mix
    clean_fraction: float = 0.4
    attack_start_min: float = 90.0
    attack_start_max: float = 200.0
    # learning
    batch: int = 64
    replay: int = 100_000
    warmup: int = 1000
    tau: float = 0.005
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    q_lr: float = 1e-3
    target_sync: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.5
    attack_noise: float = 0.5  # degC
    reward_scale: float = 0.01
    hidden: int = 64
    literal_epoch_updates: bool = False
    curriculum: bool = True  # attacker alone against static protection for the first third
    attacker_only: bool = False  # defender frozen at static thresholds throughout
    # reward shaping
    terminal_bonus: float = 300.0
    trip_cost: float = 10.0
    false_trip_cost: float = 100.0
    alarm_cost: float = 0.5
    pure_payoff: bool = False
    full_state: bool = False
    r_th: float = 0.0  # 0 = calibrate from clean episodes
    calib_episodes: int = 10

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.steps_per_episode <= 0 or self.episodes <= 0:
            raise ValueError("episodes and steps_per_episode must be positive")
        if self.episodes > MAX_EPISODES or not 0 <= self.seed < MAX_EPISODES:
            raise ValueError(f"episodes and seed must lie in [0, {MAX_EPISODES})")
        n = self.control_dt / self.physics_dt
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ValueError("control_dt must be a positive multiple of physics_dt")

    @property
    def decimation(self) -> int:
        return int(round(self.control_dt / self.physics_dt))


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    base = base or TrainConfig()
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(TrainConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            updates[key] = _parse_value(val, defaults[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return dataclasses.replace(base, **updates)


def config_overrides(cfg: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    return parse_config_text("\n".join(f"{k} = {v}" for k, v in pairs.items()), cfg)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(TrainConfig))


def make_scenario(cfg: TrainConfig, noise_var: float | None = None) -> Scenario:
    var = cfg.noise_var if noise_var is None else noise_var
    return stressed_ieee14(noise=NoiseSpec(var), dt_physics=cfg.physics_dt, dt_control=cfg.control_dt)


def env_config(cfg: TrainConfig, r_th: float, **kw) -> EnvConfig:
    base = dict(episode_steps=cfg.steps_per_episode, obs_noise=cfg.obs_noise,
                terminal_bonus=cfg.terminal_bonus, trip_cost=cfg.trip_cost,
                false_trip_cost=cfg.false_trip_cost, alarm_cost=cfg.alarm_cost,
                pure_payoff=cfg.pure_payoff, full_state=cfg.full_state,
                load_jitter=cfg.load_jitter, ambient_jitter=cfg.ambient_jitter, temp_jitter=cfg.temp_jitter,
                payoff=PayoffParams(k_gain=2.0, r_th=r_th))
    base.update(kw)
    return EnvConfig(**base)


def make_env(cfg: TrainConfig, r_th: float, noise_var: float | None = None, **kw) -> Env:
    return Env(make_scenario(cfg, noise_var), env_config(cfg, r_th, **kw))


@dataclass
class TrainResult:
    attacker: DdpgAgent
    defender: DqnAgent
    metrics: list[dict]
    r_th: float
    seconds: float = 0.0


METRIC_FIELDS = ("episode", "phase", "clean", "attack_start", "steps", "blackout", "first_trip_s",
                 "trips", "return_laa", "return_avps", "epsilon", "critic_loss", "q_loss")


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def train_seed(seed: int, episode: int) -> int:
    return seed * MAX_EPISODES + episode


def eval_seed(seed: int, k: int) -> int:
    return EVAL_SEED_OFFSET + seed * MAX_EPISODES + k


def train(cfg: TrainConfig, progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Alternating attacker/defender training.

    Each episode draws its initial state, whether it is attack-free and when
    the attack starts from a seed derived from (cfg.seed, episode). The
    attacker stores a transition only while its input reaches the grid.
    """
    t_start = time.perf_counter()
    r_th = cfg.r_th or calibrate_r_th(make_env(cfg, 1.0), cfg.calib_episodes,
                                      seed=CALIB_SEED_OFFSET + cfg.seed * 1000)
    env = make_env(cfg, r_th)
    dim = env.obs_dim
    root = np.random.SeedSequence(cfg.seed)
    a_ss, d_ss, ra_ss, rd_ss = root.spawn(4)
    hidden = (cfg.hidden, cfg.hidden)
    attacker = DdpgAgent(dim, DdpgConfig(hidden, cfg.actor_lr, cfg.critic_lr, cfg.gamma, cfg.tau,
                                         cfg.attack_noise, DELTA_T_MAX), seed=int(a_ss.generate_state(1)[0]))
    defender = DqnAgent(dim, DqnConfig(len(DEFENSE_LEVELS), hidden, cfg.q_lr, cfg.gamma, cfg.target_sync,
                                       cfg.eps_start, cfg.eps_end), seed=int(d_ss.generate_state(1)[0]))
    buf_a = ReplayBuffer(cfg.replay, dim, int(ra_ss.generate_state(1)[0]))
    buf_d = ReplayBuffer(cfg.replay, dim, int(rd_ss.generate_state(1)[0]))

    n_pre = cfg.episodes // 3 if (cfg.curriculum and not cfg.attacker_only) else 0
    defender_eps = 0 if cfg.attacker_only else cfg.episodes - n_pre
    eps_steps = max(1.0, cfg.eps_decay_frac * defender_eps * cfg.steps_per_episode)
    d_steps = 0
    metrics = []
    for ep in range(cfg.episodes):
        ep_rng = np.random.default_rng([cfg.seed, ep, 17])
        clean = bool(ep_rng.random() < cfg.clean_fraction)
        start = float(ep_rng.uniform(cfg.attack_start_min, cfg.attack_start_max))
        start = float(round(start))
        env.cfg = env_config(cfg, r_th, attack=not clean, attack_start=start)
        defend = not cfg.attacker_only and ep >= n_pre
        x = env.reset(train_seed(cfg.seed, ep))
        ret_a = ret_d = 0.0
        trips, first_trip = 0, math.nan
        closs, qloss = [], []
        pending = 0
        eps = cfg.eps_end
        while not env.done:
            attacker.norm.update(x)
            defender.norm.update(x)
            active = env.attack_active()
            a = attacker.act(x, explore=True)
            if defend:
                eps = max(cfg.eps_end, cfg.eps_start - (cfg.eps_start - cfg.eps_end) * d_steps / eps_steps)
                d = defender.act(x, eps)
                d_steps += 1
            else:
                d = 0
            x2, r_a, r_d, done, info = env.step(a, d if defend else None)
            ret_a += r_a
            ret_d += r_d
            for e in info["events"]:
                if e.kind in (EventKind.UV_TRIP, EventKind.OV_TRIP):
                    trips += 1
                    if math.isnan(first_trip):
                        first_trip = e.time
            terminal = bool(info["blackout"])
            if active:
                buf_a.add(Transition(x, a, r_a * cfg.reward_scale, x2, terminal))
            buf_d.add(Transition(x, d, r_d * cfg.reward_scale, x2, terminal))
            x = x2
            if cfg.literal_epoch_updates:
                pending += 1
            else:
                _learn(cfg, attacker, defender, buf_a, buf_d, defend, closs, qloss, 1)
        if cfg.literal_epoch_updates:
            _learn(cfg, attacker, defender, buf_a, buf_d, defend, closs, qloss, pending)
        row = {"episode": ep, "phase": "joint" if defend else "attacker", "clean": int(clean),
               "attack_start": start, "steps": env.steps, "blackout": int(env.sim.blackout),
               "first_trip_s": first_trip, "trips": trips, "return_laa": ret_a, "return_avps": ret_d,
               "epsilon": eps if defend else math.nan,
               "critic_loss": float(np.mean(closs)) if closs else math.nan,
               "q_loss": float(np.mean(qloss)) if qloss else math.nan}
        metrics.append(row)
        if progress:
            progress(row)
    attacker.norm.frozen = True
    defender.norm.frozen = True
    return TrainResult(attacker, defender, metrics, r_th, time.perf_counter() - t_start)


def _learn(cfg, attacker, defender, buf_a, buf_d, defend, closs, qloss, n):
    for _ in range(n):
        if len(buf_a) >= cfg.warmup:
            closs.append(attacker.update(buf_a.sample(cfg.batch))[0])
        if defend and len(buf_d) >= cfg.warmup:
            qloss.append(defender.update(buf_d.sample(cfg.batch)))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

Attacker = Callable[[np.ndarray], float]
Defender = Callable[[np.ndarray], int]


def as_attacker(obj) -> Attacker | None:
    """DdpgAgent, constant dT, callable or None (no attack input)."""
    if obj is None:
        return None
    if isinstance(obj, DdpgAgent):
        return lambda x: obj.act(x, explore=False)
    if isinstance(obj, (int, float)):
        val = float(obj)
        return lambda x: val
    return obj


def as_defender(obj) -> Defender | None:
    """DqnAgent, callable, or None for static protection."""
    if obj is None:
        return None
    if isinstance(obj, DqnAgent):
        return lambda x: obj.act(x, 0.0)
    return obj


@dataclass
class EpisodeResult:
    seed: int
    attack: bool
    attack_start: float
    blackout: bool
    blackout_time: float
    first_trip: float  # s, nan if no voltage-relay trip
    trips: int
    steps: int
    return_laa: float
    records: list = field(default_factory=list, repr=False)

    @property
    def premature(self) -> bool:
        return not math.isnan(self.first_trip) and (not self.attack or self.first_trip < self.attack_start)


@dataclass
class EvalReport:
    episodes: list[EpisodeResult]

    @property
    def n(self) -> int:
        return len(self.episodes)

    @property
    def blackout_rate(self) -> float:
        return sum(e.blackout for e in self.episodes) / max(1, self.n)

    @property
    def trip_rate(self) -> float:
        return sum(not math.isnan(e.first_trip) for e in self.episodes) / max(1, self.n)

    @property
    def false_positives(self) -> int:
        return sum(e.premature for e in self.episodes)

    @property
    def mean_time_to_trip(self) -> float:
        ts = [e.first_trip - e.attack_start for e in self.episodes
              if e.attack and not math.isnan(e.first_trip) and not e.premature]
        return float(np.mean(ts)) if ts else math.nan

    def summary(self) -> dict:
        return {"episodes": self.n, "blackout_rate": self.blackout_rate, "trip_rate": self.trip_rate,
                "false_positives": self.false_positives, "mean_time_to_trip_s": self.mean_time_to_trip}


EPISODE_FIELDS = ("seed", "attack", "attack_start", "blackout", "blackout_time", "first_trip", "trips",
                  "steps", "return_laa")


def episodes_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_FIELDS)
    for e in report.episodes:
        w.writerow([e.seed, int(e.attack), repr(e.attack_start), int(e.blackout), repr(e.blackout_time),
                    repr(e.first_trip), e.trips, e.steps, repr(e.return_laa)])
    return buf.getvalue()


def run_episode(env: Env, attacker: Attacker | None, defender: Defender | None, seed: int,
                keep_records: bool = False) -> EpisodeResult:
    x = env.reset(seed)
    first_trip, trips, ret = math.nan, 0, 0.0
    while not env.done:
        a = attacker(x) if attacker is not None else 0.0
        d = defender(x) if defender is not None else None
        x, r_a, _, _, info = env.step(a, d)
        ret += r_a
        for e in info["events"]:
            if e.kind in (EventKind.UV_TRIP, EventKind.OV_TRIP):
                trips += 1
                if math.isnan(first_trip):
                    first_trip = e.time
    return EpisodeResult(seed, env.cfg.attack, env.cfg.attack_start, env.sim.blackout,
                         env.sim.t if env.sim.blackout else math.nan, first_trip, trips, env.steps, ret,
                         list(env.records) if keep_records else [])


def evaluate(attacker, defender, n: int, cfg: TrainConfig | None = None, r_th: float = 0.01, *,
             attack: bool = True, attack_start: float = 120.0, seed: int = 0,
             noise_var: float | None = None, keep_records: bool = False) -> EvalReport:
    """Frozen policies on ``n`` held-out episodes (seeds offset from every training seed)."""
    cfg = cfg or TrainConfig()
    env = make_env(cfg, r_th, noise_var, attack=attack, attack_start=attack_start)
    check_dims(env, attacker, defender)
    att, dfn = as_attacker(attacker), as_defender(defender)
    if not 0 <= seed < MAX_EPISODES or n > MAX_EPISODES:
        raise ValueError("evaluation seed or episode count out of range")
    eps = [run_episode(env, att, dfn, eval_seed(seed, k), keep_records) for k in range(n)]
    return EvalReport(eps)


def check_dims(env: Env, *agents) -> None:
    for ag in agents:
        if isinstance(ag, (DdpgAgent, DqnAgent)) and ag.obs_dim != env.obs_dim:
            raise ValueError(f"policy expects {ag.obs_dim} observation features, environment gives {env.obs_dim}")


@dataclass
class FprTable:
    rows: list[tuple[float, int, float, bool]]  # variance, run, trigger time (s), premature
    attack_start: float

    def premature_variances(self) -> list[float]:
        out = []
        for v, _, _, p in self.rows:
            if p and v not in out:
                out.append(v)
        return out

    @property
    def variances(self) -> list[float]:
        out = []
        for v, *_ in self.rows:
            if v not in out:
                out.append(v)
        return out

    @property
    def fpr(self) -> tuple[int, int]:
        return len(self.premature_variances()), len(self.variances)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variance_mw", "run", "trigger_time_s", "premature"])
        for v, k, t, p in self.rows:
            w.writerow([repr(v), k, repr(t), int(p)])
        num, den = self.fpr
        w.writerow(["fpr", f"{num}/{den}", "", ""])
        return buf.getvalue()


def fpr_sweep(defender, attacker=2.0, variances=FPR_VARIANCES, runs_per_variance: int = 10,
              attack_start: float = 120.0, cfg: TrainConfig | None = None, r_th: float = 0.01,
              seed: int = 0) -> FprTable:
    """Attack episodes under growing load noise; a variance is a false positive
    when any of its runs trips a voltage relay before the attack starts."""
    rows = []
    for vi, var in enumerate(variances):
        rep = evaluate(attacker, defender, runs_per_variance, cfg, r_th, attack=True,
                       attack_start=attack_start, seed=seed * 101 + vi + 1, noise_var=var)
        for k, e in enumerate(rep.episodes):
            rows.append((float(var), k, e.first_trip, e.premature))
    return FprTable(rows, attack_start)


def write_text(path: str | Path, text: str) -> None:
    Path(path).write_text(text)
