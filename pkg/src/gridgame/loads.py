"""Thermostatic HVAC loads, ambient profiles and load-profile noise.

The HVAC is a cooling unit with a hysteresis thermostat. An attacker
falsifies the sensed temperature by ``delta_t_attack``: the thermostat acts on
``t_inside + delta_t_attack`` and the unit draws an extra ``k_gain * delta_t``
MW on top of its compressor power.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import GridCase


@dataclass(frozen=True)
class HvacParams:
    bus: int
    r_thermal: float = 1.0  # degC per MW of heat flow
    c_thermal: float = 60.0  # MJ per degC
    setpoint: float = 24.0  # degC
    deadband: float = 0.5  # degC, hysteresis half-width
    p_rated: float = 8.0  # MW
    q_factor: float = 0.2  # Q = q_factor * P
    k_gain: float = 2.0  # MW per degC of falsification

    def __post_init__(self):
        for name in ("r_thermal", "c_thermal", "setpoint", "deadband", "p_rated", "q_factor", "k_gain"):
            if not getattr(self, name) > 0:
                raise ValueError(f"HvacParams.{name} must be positive")


@dataclass(frozen=True)
class HvacState:
    t_inside: float
    on: bool = False
    delta_t_attack: float = 0.0
    p_draw: float = 0.0  # MW


def attack_power_delta(delta_t: float, k_gain: float) -> float:
    """Extra demand (MW) caused by a sensor falsification of ``delta_t`` degC."""
    return k_gain * delta_t


def hvac_draw(on: bool, delta_t: float, params: HvacParams) -> float:
    return (params.p_rated if on else 0.0) + attack_power_delta(delta_t, params.k_gain)


def step_hvac(state: HvacState, params: HvacParams, ambient: float, dt: float) -> HvacState:
    """Advance the room temperature by ``dt`` seconds, then apply the thermostat.

    The RC update is exact for a piecewise-constant compressor state, so the
    result does not depend on how ``dt`` is subdivided between switchings.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cooling = params.p_rated if state.on else 0.0
    t_eq = ambient - params.r_thermal * cooling
    tau = params.r_thermal * params.c_thermal  # MJ/MW = s
    t_in = t_eq + (state.t_inside - t_eq) * math.exp(-dt / tau)
    sensed = t_in + state.delta_t_attack
    on = state.on
    if sensed > params.setpoint + params.deadband:
        on = True
    elif sensed < params.setpoint - params.deadband:
        on = False
    return HvacState(t_in, on, state.delta_t_attack, hvac_draw(on, state.delta_t_attack, params))


def run_hvac(state: HvacState, params: HvacParams, ambient: Sequence[float], dt: float) -> HvacState:
    """``step_hvac`` over consecutive substeps, one ambient value per substep."""
    tau = params.r_thermal * params.c_thermal
    decay = math.exp(-dt / tau)
    hi, lo = params.setpoint + params.deadband, params.setpoint - params.deadband
    t_in, on, dT = state.t_inside, state.on, state.delta_t_attack
    for amb in ambient:
        t_eq = amb - params.r_thermal * (params.p_rated if on else 0.0)
        t_in = t_eq + (t_in - t_eq) * decay
        sensed = t_in + dT
        if sensed > hi:
            on = True
        elif sensed < lo:
            on = False
    return HvacState(t_in, on, dT, hvac_draw(on, dT, params))


def set_attack(state: HvacState, params: HvacParams, delta_t: float) -> HvacState:
    return dataclasses.replace(state, delta_t_attack=delta_t, p_draw=hvac_draw(state.on, delta_t, params))


@dataclass(frozen=True)
class AmbientProfile:
    samples: tuple[float, ...]
    step: float  # s

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(float(s) for s in self.samples))
        if not self.samples:
            raise ValueError("ambient profile is empty")
        if not self.step > 0:
            raise ValueError("profile step must be positive")

    def at(self, t: float) -> float:
        """Linear interpolation, held constant beyond the ends."""
        x = t / self.step
        if x <= 0:
            return self.samples[0]
        k = int(x)
        if k >= len(self.samples) - 1:
            return self.samples[-1]
        w = x - k
        return self.samples[k] * (1.0 - w) + self.samples[k + 1] * w

    def at_many(self, t: np.ndarray) -> np.ndarray:
        grid = np.arange(len(self.samples)) * self.step
        return np.interp(t, grid, self.samples)

    def shifted(self, offset_c: float) -> "AmbientProfile":
        return AmbientProfile(tuple(s + offset_c for s in self.samples), self.step)

    @property
    def duration(self) -> float:
        return self.step * (len(self.samples) - 1)

    @classmethod
    def peak_hump(cls, base_c: float = 28.0, peak_c: float = 36.0, peak_time: float = 120.0,
                  rise: float = 80.0, fall: float = 900.0, duration: float = 3600.0,
                  step: float = 1.0) -> "AmbientProfile":
        """Outdoor temperature with a hump peaking at ``peak_time``.

        Gaussian flanks with separate rise and fall widths (s); the slow fall
        keeps demand high for several minutes after the peak.
        """
        t = np.arange(0.0, duration + step / 2, step)
        width = np.where(t <= peak_time, rise, fall)
        vals = base_c + (peak_c - base_c) * np.exp(-(((t - peak_time) / width) ** 2))
        return cls(tuple(vals.tolist()), step)

    @classmethod
    def from_csv(cls, path: str | Path) -> "AmbientProfile":
        times, vals = [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"time_s", "ambient_c"} <= set(reader.fieldnames):
                raise ValueError("profile CSV needs columns time_s,ambient_c")
            for row in reader:
                times.append(float(row["time_s"]))
                vals.append(float(row["ambient_c"]))
        if len(times) < 2:
            raise ValueError("profile CSV needs at least two rows")
        steps = np.diff(times)
        if times[0] != 0.0 or np.any(np.abs(steps - steps[0]) > 1e-9) or steps[0] <= 0:
            raise ValueError("profile must start at 0 s with a fixed positive step")
        return cls(tuple(vals), float(steps[0]))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s", "ambient_c"])
            for k, v in enumerate(self.samples):
                w.writerow([repr(k * self.step), repr(v)])


@dataclass(frozen=True)
class CoolingLoad:
    """Aggregate temperature-sensitive demand of many small air conditioners.

    Draws ``mw_per_c`` MW for every degree of outdoor temperature above
    ``balance_c``; this shapes the daily peak without any thermostat cycling.
    """

    bus: int
    mw_per_c: float
    balance_c: float = 28.0
    q_factor: float = 0.2

    def demand(self, ambient: float) -> float:
        return self.mw_per_c * max(0.0, ambient - self.balance_c)


@dataclass(frozen=True)
class NoiseSpec:
    """Centered uniform noise on HVAC load profiles.

    ``variance_mw`` is the variance in MW^2, so samples lie in
    ``[-sqrt(3 * variance_mw), +sqrt(3 * variance_mw)]``.
    """

    variance_mw: float = 0.0
    seed: int = 0
    distribution: str = "uniform"

    def __post_init__(self):
        if not self.variance_mw >= 0:
            raise ValueError("noise variance must be >= 0")
        if self.distribution != "uniform":
            raise ValueError("only uniform noise is supported")

    @property
    def half_width(self) -> float:
        return math.sqrt(3.0 * self.variance_mw)


def noise_sample(noise: NoiseSpec, bus: int, t: float) -> float:
    """Deterministic sample for (seed, bus, t); t is resolved to the millisecond."""
    if noise.variance_mw == 0.0:
        return 0.0
    rng = np.random.default_rng([noise.seed, bus, int(round(t * 1000.0))])
    return float(rng.uniform(-noise.half_width, noise.half_width))


def aggregate_demand(hvacs: Sequence[tuple[HvacParams, HvacState]], base_loads: GridCase,
                     noise: NoiseSpec | None = None, t: float = 0.0,
                     cooling: Sequence[CoolingLoad] = (), ambient: float | None = None,
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus (P MW, Q MVAr) demand in ``base_loads.buses`` order.

    Static case load + HVAC draw + profile noise at each HVAC bus, plus any
    aggregate cooling loads evaluated at ``ambient``.
    """
    p = np.array([b.p_load for b in base_loads.buses], dtype=float)
    q = np.array([b.q_load for b in base_loads.buses], dtype=float)
    for params, state in hvacs:
        k = base_loads.index(params.bus)
        extra = state.p_draw
        if noise is not None:
            extra += noise_sample(noise, params.bus, t)
        p[k] += extra
        q[k] += params.q_factor * extra
    if cooling:
        if ambient is None:
            raise ValueError("cooling loads need an ambient temperature")
        for cl in cooling:
            k = base_loads.index(cl.bus)
            d = cl.demand(ambient)
            p[k] += d
            q[k] += cl.q_factor * d
    return p, q
