"""EV session model, history-based prediction, fleet generation, baseline.

Charging rates are kW at the session plug (positive = charging, negative =
V2G discharge); energies are kWh.  Slot width and horizon length come from
the scenario so sessions themselves stay unit-light.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fileio


class FleetError(ValueError):
    pass


@dataclass(frozen=True)
class EvSession:
    """One EV's predicted availability window, demand, and rate bounds."""

    ev_id: str
    bus_id: int
    t_start: int              # predicted plug-in slot
    t_end: int                # predicted departure slot, exclusive
    energy_kwh: float         # predicted net demand over the window
    p_max_kw: float           # max charge rate, >= 0
    d_max_kw: float           # max discharge rate, <= 0

    @property
    def window_slots(self) -> int:
        return self.t_end - self.t_start

    def energy_bounds_kwh(self, slot_hours: float) -> tuple[float, float]:
        w = self.window_slots * slot_hours
        return self.d_max_kw * w, self.p_max_kw * w

    def validate(self, slots: int, slot_hours: float) -> None:
        if not (0 <= self.t_start < self.t_end <= slots):
            raise FleetError(
                f"session {self.ev_id}: window [{self.t_start}, {self.t_end}) "
                f"outside horizon of {slots} slots"
            )
        if self.p_max_kw < 0 or self.d_max_kw > 0:
            raise FleetError(
                f"session {self.ev_id}: rate bounds must satisfy "
                f"d_max <= 0 <= p_max, got [{self.d_max_kw}, {self.p_max_kw}]"
            )
        lo, hi = self.energy_bounds_kwh(slot_hours)
        if not (lo - 1e-9 <= self.energy_kwh <= hi + 1e-9):
            raise FleetError(
                f"session {self.ev_id}: energy {self.energy_kwh} kWh outside "
                f"feasible interval [{lo}, {hi}] kWh"
            )


@dataclass(frozen=True)
class HistoricalRecord:
    ev_id: str
    date: str
    start_slot: int
    end_slot: int
    energy_kwh: float

    def __post_init__(self):
        if self.start_slot >= self.end_slot:
            raise FleetError(f"record {self.ev_id}@{self.date}: start must precede end")
        if self.energy_kwh < 0:
            raise FleetError(f"record {self.ev_id}@{self.date}: negative energy")


@dataclass(frozen=True)
class FleetScenario:
    sessions: tuple[EvSession, ...]
    slots_per_horizon: int
    slot_hours: float
    per_bus_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.ev_id for s in self.sessions]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise FleetError(f"duplicate ev_id(s) in scenario: {dupes}")
        counts: dict[int, int] = {}
        for s in self.sessions:
            s.validate(self.slots_per_horizon, self.slot_hours)
            counts[s.bus_id] = counts.get(s.bus_id, 0) + 1
        if not self.per_bus_counts:
            object.__setattr__(self, "per_bus_counts", counts)
        elif self.per_bus_counts != counts:
            raise FleetError(
                f"per-bus counts {self.per_bus_counts} inconsistent with sessions {counts}"
            )

    def validate_buses(self, valid_bus_ids: set[int]) -> None:
        for s in self.sessions:
            if s.bus_id not in valid_bus_ids:
                raise FleetError(f"session {s.ev_id}: unknown bus {s.bus_id}")


# --- prediction from history -------------------------------------------------

def predict_sessions(history: list[HistoricalRecord], slots: int, slot_hours: float,
                     p_max_kw: float, d_max_kw: float,
                     bus_assignment: dict[str, int] | int = 0,
                     ev_ids: list[str] | None = None,
                     ) -> tuple[list[EvSession], list[str]]:
    """Per-EV empirical-mean prediction of window and energy demand.

    Returns the predicted sessions (sorted by ev_id) and a list of flags for
    sessions that had to be clamped to feasibility.  Raises FleetError when a
    requested EV has no records.
    """
    by_ev: dict[str, list[HistoricalRecord]] = {}
    for rec in history:
        by_ev.setdefault(rec.ev_id, []).append(rec)

    wanted = sorted(set(ev_ids)) if ev_ids is not None else sorted(by_ev)
    if not wanted:
        raise FleetError("no historical records to predict from")

    sessions, flags = [], []
    for ev in wanted:
        recs = by_ev.get(ev)
        if not recs:
            raise FleetError(f"no historical records for EV {ev!r}")
        start = int(round(float(np.mean([r.start_slot for r in recs]))))
        end = int(round(float(np.mean([r.end_slot for r in recs]))))
        energy = float(np.mean([r.energy_kwh for r in recs]))

        start = min(max(start, 0), slots - 1)
        end = min(max(end, start + 1), slots)
        bus = bus_assignment[ev] if isinstance(bus_assignment, dict) else bus_assignment

        window_h = (end - start) * slot_hours
        lo, hi = d_max_kw * window_h, p_max_kw * window_h
        if not (lo <= energy <= hi):
            clamped = min(max(energy, lo), hi)
            flags.append(
                f"predicted session {ev}: energy {energy:.3f} kWh clamped to "
                f"{clamped:.3f} kWh (feasible [{lo:.3f}, {hi:.3f}])"
            )
            energy = clamped
        sessions.append(EvSession(ev, bus, start, end, energy, p_max_kw, d_max_kw))
    return sessions, flags


# --- synthetic fleet generation ----------------------------------------------

@dataclass(frozen=True)
class FleetSpec:
    """Distribution parameters for deterministic fleet generation."""

    counts: dict[int, int]            # bus id -> number of sessions
    slots: int
    slot_hours: float
    arrival_mean_slot: float
    arrival_std_slots: float
    duration_mean_slots: float
    duration_std_slots: float
    energy_kwh_range: tuple[float, float]
    p_max_kw: float
    d_max_kw: float

    def validate(self) -> None:
        if any(c < 0 for c in self.counts.values()):
            raise FleetError(f"negative session count in {self.counts}")
        lo, hi = self.energy_kwh_range
        if not (0.0 <= lo <= hi):
            raise FleetError(f"energy range [{lo}, {hi}] must satisfy 0 <= lo <= hi")
        if self.p_max_kw < 0 or self.d_max_kw > 0:
            raise FleetError("rates must satisfy d_max <= 0 <= p_max")
        if lo > 0 and self.p_max_kw == 0:
            raise FleetError("positive energy demanded but p_max is zero")
        if self.duration_mean_slots < 1 or self.slots < 2:
            raise FleetError("horizon/duration too short to place sessions")


def generate_fleet(seed: int, spec: FleetSpec) -> FleetScenario:
    """Deterministic synthetic fleet; identical (seed, spec) give identical output."""
    spec.validate()
    rng = np.random.default_rng(seed)
    sessions = []
    for bus in sorted(spec.counts):
        for n in range(spec.counts[bus]):
            start = int(round(rng.normal(spec.arrival_mean_slot, spec.arrival_std_slots)))
            duration = int(round(rng.normal(spec.duration_mean_slots, spec.duration_std_slots)))
            start = min(max(start, 0), spec.slots - 2)
            end = min(max(start + max(duration, 1), start + 1), spec.slots)
            energy = float(rng.uniform(*spec.energy_kwh_range))
            cap = spec.p_max_kw * (end - start) * spec.slot_hours
            energy = min(max(energy, 0.0), cap)
            sessions.append(
                EvSession(
                    ev_id=f"b{bus}e{n:04d}",
                    bus_id=bus,
                    t_start=start,
                    t_end=end,
                    energy_kwh=energy,
                    p_max_kw=spec.p_max_kw,
                    d_max_kw=spec.d_max_kw,
                )
            )
    return FleetScenario(tuple(sessions), spec.slots, spec.slot_hours)


# --- uncoordinated baseline ----------------------------------------------

def uncoordinated_profile(session: EvSession, slots: int, slot_hours: float) -> np.ndarray:
    """Plug-in-and-charge-at-full-rate baseline; no V2G.

    Charges at p_max from arrival, with a fractional final slot so the
    delivered energy matches the demand exactly.
    """
    if session.energy_kwh < 0:
        raise FleetError(
            f"session {session.ev_id}: baseline undefined for net-discharge "
            f"energy {session.energy_kwh} kWh"
        )
    session.validate(slots, slot_hours)
    profile = np.zeros(slots)
    remaining = session.energy_kwh
    for t in range(session.t_start, session.t_end):
        if remaining <= 0.0:
            break
        p = min(session.p_max_kw, remaining / slot_hours)
        profile[t] = p
        remaining -= p * slot_hours
    return profile


# --- file formats -------------------------------------------------------------

_SESSION_HEADER = ["ev_id", "bus_id", "t_start", "t_end", "energy_kwh", "p_max_kw", "d_max_kw"]
_HISTORY_HEADER = ["ev_id", "date", "start_slot", "end_slot", "energy_kwh"]


def write_sessions(path, sessions) -> None:
    fileio.write_rows(
        path,
        _SESSION_HEADER,
        ([s.ev_id, s.bus_id, s.t_start, s.t_end, s.energy_kwh, s.p_max_kw, s.d_max_kw]
         for s in sessions),
    )


def read_sessions(path) -> list[EvSession]:
    rows = fileio.read_rows(path, _SESSION_HEADER)
    return [
        EvSession(
            ev_id=r[0],
            bus_id=int(r[1]),
            t_start=int(r[2]),
            t_end=int(r[3]),
            energy_kwh=float(r[4]),
            p_max_kw=float(r[5]),
            d_max_kw=float(r[6]),
        )
        for r in rows
    ]


def write_history(path, records) -> None:
    fileio.write_rows(
        path,
        _HISTORY_HEADER,
        ([r.ev_id, r.date, r.start_slot, r.end_slot, r.energy_kwh] for r in records),
    )


def read_history(path) -> list[HistoricalRecord]:
    rows = fileio.read_rows(path, _HISTORY_HEADER)
    return [
        HistoricalRecord(r[0], r[1], int(r[2]), int(r[3]), float(r[4]))
        for r in rows
    ]
