"""Under/over-voltage relays with inverse-time delays and frequency load shedding."""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
from dataclasses import dataclass
from typing import Iterable

V_LOWER_DEFAULT = 0.8  # pu, 176 kV on a 220 kV base
ALPHA_DEFAULT = 1.625  # 286 / 176
V_LOWER_RANGE = (0.80, 1.30)
F_LOWER = 59.5
F_UPPER = 60.5
FREQ_DELAY_S = 540.0


class NotInViolation(ValueError):
    """Delay requested for a voltage inside the allowed band."""


class EventKind(str, enum.Enum):
    UV_TRIP = "uv_trip"
    OV_TRIP = "ov_trip"
    UFLS_SHED = "ufls_shed"
    OFLS_SHED = "ofls_shed"


@dataclass(frozen=True)
class ProtectionEvent:
    kind: EventKind
    bus: int
    time: float


def uv_delay(v: float, v_lower: float) -> float:
    """Under-voltage trip delay in minutes."""
    if not 0.0 <= v < v_lower:
        raise NotInViolation(f"v={v} is not below v_lower={v_lower}")
    return 0.5 / (1.0 - v / v_lower)


def ov_delay(v: float, v_upper: float) -> float:
    """Over-voltage trip delay in minutes."""
    if not v > v_upper:
        raise NotInViolation(f"v={v} is not above v_upper={v_upper}")
    return 0.5 / (v / v_upper - 1.0)


@dataclass(frozen=True)
class VoltageRelay:
    bus: int
    v_lower: float = V_LOWER_DEFAULT
    alpha: float = ALPHA_DEFAULT
    uv_timer: float = 0.0  # s
    ov_timer: float = 0.0  # s
    tripped: bool = False

    def __post_init__(self):
        if not self.v_lower > 0:
            raise ValueError("v_lower must be positive")
        if not 1.0 < self.alpha <= 2.0:
            raise ValueError("alpha must lie in (1, 2]")

    @property
    def v_upper(self) -> float:
        return self.alpha * self.v_lower


@dataclass(frozen=True)
class FreqRelay:
    bus: int
    f_lower: float = F_LOWER
    f_upper: float = F_UPPER
    delay: float = FREQ_DELAY_S
    timer: float = 0.0
    shed: bool = False

    def __post_init__(self):
        if not self.f_lower < 60.0 < self.f_upper:
            raise ValueError("frequency band must contain 60 Hz")


def step_voltage_relay(relay: VoltageRelay, v: float, dt: float, t: float = 0.0
                       ) -> tuple[VoltageRelay, ProtectionEvent | None]:
    """Advance the relay by ``dt`` seconds at voltage ``v``.

    Violation time accumulates and is compared against the delay computed
    from the present voltage, so a deepening sag trips sooner. Leaving the
    band resets the timer. ``t`` stamps the event (end of the step).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if relay.tripped:
        return relay, None
    if v < relay.v_lower:
        timer = relay.uv_timer + dt
        if timer >= 60.0 * uv_delay(max(v, 0.0), relay.v_lower):
            return (dataclasses.replace(relay, uv_timer=timer, ov_timer=0.0, tripped=True),
                    ProtectionEvent(EventKind.UV_TRIP, relay.bus, t))
        return dataclasses.replace(relay, uv_timer=timer, ov_timer=0.0), None
    if v > relay.v_upper:
        timer = relay.ov_timer + dt
        if timer >= 60.0 * ov_delay(v, relay.v_upper):
            return (dataclasses.replace(relay, uv_timer=0.0, ov_timer=timer, tripped=True),
                    ProtectionEvent(EventKind.OV_TRIP, relay.bus, t))
        return dataclasses.replace(relay, uv_timer=0.0, ov_timer=timer), None
    if relay.uv_timer or relay.ov_timer:
        return dataclasses.replace(relay, uv_timer=0.0, ov_timer=0.0), None
    return relay, None


def step_freq_relay(relay: FreqRelay, f: float, dt: float, t: float = 0.0
                    ) -> tuple[FreqRelay, ProtectionEvent | None]:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if relay.shed:
        return relay, None
    if relay.f_lower <= f <= relay.f_upper:
        return (dataclasses.replace(relay, timer=0.0) if relay.timer else relay), None
    timer = relay.timer + dt
    # tolerance absorbs float drift from summing many small steps
    if timer >= relay.delay - 1e-9:
        kind = EventKind.UFLS_SHED if f < relay.f_lower else EventKind.OFLS_SHED
        return dataclasses.replace(relay, timer=timer, shed=True), ProtectionEvent(kind, relay.bus, t)
    return dataclasses.replace(relay, timer=timer), None


def set_thresholds(relay: VoltageRelay, v_lower: float, alpha: float = ALPHA_DEFAULT) -> VoltageRelay:
    """Retune a relay. Running timers are kept."""
    lo, hi = V_LOWER_RANGE
    if not lo - 1e-12 <= v_lower <= hi + 1e-12:
        raise ValueError(f"v_lower={v_lower} outside [{lo}, {hi}]")
    if not 1.0 < alpha <= 2.0:
        raise ValueError("alpha must lie in (1, 2]")
    if v_lower == relay.v_lower and alpha == relay.alpha:
        return relay
    return dataclasses.replace(relay, v_lower=v_lower, alpha=alpha)


def events_csv(events: Iterable[ProtectionEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_s", "kind", "bus"])
    for e in events:
        w.writerow([repr(float(e.time)), e.kind.value, e.bus])
    return buf.getvalue()
