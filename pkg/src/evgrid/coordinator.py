"""Broadcast-gather protocol shell and the real-time receding-horizon loop.

The coordinator broadcasts the control signal to every station, gathers one
profile update per station, and repeats until convergence (the scheduler
module owns the math).  A pluggable in-process loopback transport makes the
message exchange explicit and inspectable; a networked transport would slot
in behind the same interface but is not provided.

The horizon loop re-optimizes the full day at every step with the already
committed slots pinned (lower bound = upper bound = committed value) and the
session's total energy target kept on the full horizon.  Pinning past slots
while retaining the full-horizon energy equality is arithmetically the same
as shrinking the remaining demand by the delivered energy: the free slots
must supply exactly the signed remainder, so mid-horizon discharge increases
what is still owed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import fileio
from .fleet import EvSession, FleetScenario
from .scheduler import (
    ControlSignal,
    ConvergenceTrace,
    FixedPointResult,
    SchedulerConfig,
    StationTask,
    run_fixed_point,
    session_bounds,
    solve_task,
)


class CoordinatorError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class Broadcast:
    signal: ControlSignal

    @property
    def iteration(self) -> int:
        return self.signal.iteration


@dataclass(frozen=True)
class ProfileUpdate:
    ev_id: str
    profile_kw: np.ndarray
    iteration: int


@dataclass(frozen=True)
class Converged:
    iteration: int


@dataclass(frozen=True)
class Delivery:
    sender: str
    recipient: str
    message: Broadcast | ProfileUpdate | Converged


class Station:
    """One charging station: holds its task and its latest profile, and
    answers each broadcast with the proximal subproblem solution."""

    def __init__(self, task: StationTask, initial_profile_kw: np.ndarray,
                 config: SchedulerConfig):
        self.task = task
        self.profile_kw = np.array(initial_profile_kw, dtype=float, copy=True)
        self.config = config

    @property
    def ev_id(self) -> str:
        return self.task.ev_id

    def respond(self, message: Broadcast) -> ProfileUpdate:
        self.profile_kw = solve_task(message.signal, self.profile_kw, self.task,
                                     self.config)
        return ProfileUpdate(self.ev_id, self.profile_kw, message.iteration)


class LoopbackTransport:
    """In-process transport with a delivery log.

    ``silent_stations`` lists stations that receive broadcasts but never
    reply, for fault-injection tests.
    """

    def __init__(self, silent_stations: frozenset[str] | set[str] = frozenset()):
        self.silent_stations = frozenset(silent_stations)
        self.log: list[Delivery] = []

    def broadcast(self, message: Broadcast, stations: list[Station]) -> list[ProfileUpdate]:
        self.log.append(Delivery("coordinator", "*", message))
        replies: list[ProfileUpdate] = []
        for station in stations:
            if station.ev_id in self.silent_stations:
                continue
            reply = station.respond(message)
            self.log.append(Delivery(station.ev_id, "coordinator", reply))
            replies.append(reply)
        return replies

    def announce(self, message: Converged) -> None:
        self.log.append(Delivery("coordinator", "*", message))

    def serialize(self) -> list[dict]:
        rows = []
        for entry in self.log:
            msg = entry.message
            row = {
                "sender": entry.sender,
                "recipient": entry.recipient,
                "kind": type(msg).__name__.lower(),
                "iteration": msg.iteration,
            }
            if isinstance(msg, ProfileUpdate):
                row["ev_id"] = msg.ev_id
            rows.append(row)
        return rows


def transport_respond(stations: list[Station], transport: LoopbackTransport):
    """Respond hook for the fixed-point loop that routes every exchange
    through the transport and gathers replies in fixed station order."""

    def respond(signal: ControlSignal, profiles_kw: np.ndarray) -> np.ndarray:
        replies = transport.broadcast(Broadcast(signal), stations)
        by_id = {reply.ev_id: reply.profile_kw for reply in replies}
        missing = [st.ev_id for st in stations if st.ev_id not in by_id]
        if missing:
            raise ProtocolError(
                "no profile update from stations: " + ", ".join(missing)
            )
        out = np.empty_like(profiles_kw)
        for k, station in enumerate(stations):
            out[k] = by_id[station.ev_id]
        return out

    return respond


def run_with_transport(config: SchedulerConfig, base_load_mw: np.ndarray,
                       tasks: list[StationTask], transport: LoopbackTransport,
                       initial_profiles: np.ndarray | None = None,
                       initial_signal: ControlSignal | None = None) -> FixedPointResult:
    """One convergence run with every exchange logged on the transport.

    With zero stations the coordinator still emits one Broadcast (the scaled
    base load) and then Converged, so the degenerate message pattern is
    visible in the log.
    """
    if not tasks:
        signal = ControlSignal(values=base_load_mw / config.lam, iteration=0)
        transport.log.append(Delivery("coordinator", "*", Broadcast(signal)))
        result = run_fixed_point(config, base_load_mw, tasks, initial_profiles)
        transport.announce(Converged(result.trace.iterations))
        return result

    if initial_profiles is None:
        initial_profiles = np.zeros((len(tasks), config.slots))
    stations = [
        Station(task, initial_profiles[k], config) for k, task in enumerate(tasks)
    ]
    result = run_fixed_point(
        config, base_load_mw, tasks, initial_profiles, initial_signal,
        respond=transport_respond(stations, transport),
    )
    transport.announce(Converged(result.trace.iterations))
    return result


EVENT_KINDS = ("add_session", "update_energy", "remove_session")

EVENT_COLUMNS = ["slot", "kind", "ev_id", "bus_id", "t_start", "t_end",
                 "energy_kwh", "p_max_kw", "d_max_kw"]


@dataclass(frozen=True)
class ScriptedEvent:
    """One deterministic prediction update, applied at the first re-planning
    step at or after ``slot`` (already-committed slots stay committed)."""

    slot: int
    kind: str
    ev_id: str
    bus_id: int | None = None
    t_start: int | None = None
    t_end: int | None = None
    energy_kwh: float | None = None
    p_max_kw: float | None = None
    d_max_kw: float | None = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise CoordinatorError(f"unknown event kind {self.kind!r}")
        if self.slot < 0:
            raise CoordinatorError(f"event slot {self.slot} is negative")
        if self.kind == "add_session":
            needed = (self.bus_id, self.t_start, self.t_end, self.energy_kwh,
                      self.p_max_kw, self.d_max_kw)
            if any(v is None for v in needed):
                raise CoordinatorError(
                    f"add_session event for {self.ev_id!r} is missing fields"
                )
        if self.kind == "update_energy" and self.energy_kwh is None:
            raise CoordinatorError(
                f"update_energy event for {self.ev_id!r} needs energy_kwh"
            )


def write_events(path, events: list[ScriptedEvent]) -> None:
    rows = []
    for ev in events:
        rows.append([
            ev.slot, ev.kind, ev.ev_id,
            "" if ev.bus_id is None else ev.bus_id,
            "" if ev.t_start is None else ev.t_start,
            "" if ev.t_end is None else ev.t_end,
            "" if ev.energy_kwh is None else ev.energy_kwh,
            "" if ev.p_max_kw is None else ev.p_max_kw,
            "" if ev.d_max_kw is None else ev.d_max_kw,
        ])
    fileio.write_rows(path, EVENT_COLUMNS, rows)


def read_events(path) -> list[ScriptedEvent]:
    events = []
    for row in fileio.read_rows(path, EVENT_COLUMNS):
        slot, kind, ev_id, bus, t0, t1, energy, pmax, dmax = row
        events.append(ScriptedEvent(
            slot=int(slot),
            kind=kind,
            ev_id=ev_id,
            bus_id=int(bus) if bus else None,
            t_start=int(t0) if t0 else None,
            t_end=int(t1) if t1 else None,
            energy_kwh=float(energy) if energy else None,
            p_max_kw=float(pmax) if pmax else None,
            d_max_kw=float(dmax) if dmax else None,
        ))
    return events


@dataclass
class HorizonState:
    """Mutable state of the receding-horizon loop."""

    tau: int
    committed_kw: dict[str, np.ndarray]
    delivered_kwh: dict[str, float]
    sessions: dict[str, EvSession]
    removed: set[str]


@dataclass(frozen=True)
class HorizonResult:
    ev_ids: tuple[str, ...]              # every station ever active, sorted
    bus_ids: dict[str, int]
    committed_kw: np.ndarray             # rows follow ev_ids
    step_traces: tuple[ConvergenceTrace, ...]
    flags: tuple[str, ...]
    state: HorizonState


def _apply_event(event: ScriptedEvent, state: HorizonState, tau: int,
                 flags: list[str]) -> None:
    if event.kind == "add_session":
        if event.ev_id in state.sessions or event.ev_id in state.removed:
            raise CoordinatorError(
                f"event at slot {event.slot}: ev_id {event.ev_id!r} already used"
            )
        session = EvSession(
            ev_id=event.ev_id, bus_id=event.bus_id, t_start=event.t_start,
            t_end=event.t_end, energy_kwh=event.energy_kwh,
            p_max_kw=event.p_max_kw, d_max_kw=event.d_max_kw,
        )
        state.sessions[event.ev_id] = session
    elif event.kind == "update_energy":
        if event.ev_id not in state.sessions:
            raise CoordinatorError(
                f"event at slot {event.slot}: unknown ev_id {event.ev_id!r}"
            )
        state.sessions[event.ev_id] = replace(
            state.sessions[event.ev_id], energy_kwh=event.energy_kwh
        )
    else:
        if event.ev_id not in state.sessions:
            raise CoordinatorError(
                f"event at slot {event.slot}: unknown ev_id {event.ev_id!r}"
            )
        session = state.sessions.pop(event.ev_id)
        state.removed.add(event.ev_id)
        delivered = state.delivered_kwh.get(event.ev_id, 0.0)
        flags.append(
            f"step {tau}: session {event.ev_id} removed before completion; "
            f"delivered {delivered!r} of {session.energy_kwh!r} kWh"
        )


def run_receding_horizon(config: SchedulerConfig, base_load_mw: np.ndarray,
                         scenario: FleetScenario, steps: int,
                         events: list[ScriptedEvent] = (),
                         transport: LoopbackTransport | None = None) -> HorizonResult:
    """Commit the schedule step by step, re-optimizing as predictions change.

    Each step pins all previously committed slots, applies this step's
    scripted events, and re-runs the fixed-point iteration.  When nothing
    changed, the carried control signal lets the run converge immediately
    with profiles untouched, so an event-free horizon reproduces the one-shot
    solution slot for slot.
    """
    t = config.slots
    dt = config.slot_hours
    if scenario.slots_per_horizon != t or scenario.slot_hours != dt:
        raise CoordinatorError("scenario slot grid differs from scheduler config")
    if steps < 1 or steps > t:
        raise CoordinatorError(f"steps {steps} must be in 1..{t}")
    sps = t // steps
    for event in events:
        if not 0 <= event.slot < t:
            raise CoordinatorError(f"event slot {event.slot} outside 0..{t - 1}")

    events_by_step: dict[int, list[ScriptedEvent]] = {}
    for event in events:
        # an event lands at the first re-planning instant at or after its
        # slot, so slots committed earlier are never re-opened; events past
        # the final re-plan fold into the last step
        step = min(-(-event.slot // sps), steps - 1)
        events_by_step.setdefault(step, []).append(event)

    state = HorizonState(
        tau=0,
        committed_kw={},
        delivered_kwh={},
        sessions={s.ev_id: s for s in scenario.sessions},
        removed=set(),
    )
    profiles: dict[str, np.ndarray] = {}
    bus_ids: dict[str, int] = {}
    carried: ControlSignal | None = None
    step_traces: list[ConvergenceTrace] = []
    flags: list[str] = []

    for tau in range(steps):
        state.tau = tau
        slot0 = tau * sps
        slot1 = (tau + 1) * sps if tau < steps - 1 else t

        changed = False
        for event in events_by_step.get(tau, []):
            _apply_event(event, state, tau, flags)
            changed = True

        active_ids = sorted(state.sessions)
        tasks: list[StationTask] = []
        init = np.zeros((len(active_ids), t))
        for k, ev_id in enumerate(active_ids):
            session = state.sessions[ev_id]
            bus_ids[ev_id] = session.bus_id
            committed = state.committed_kw.setdefault(ev_id, np.zeros(t))
            state.delivered_kwh.setdefault(ev_id, 0.0)
            lo, hi = session_bounds(session, t)
            lo[:slot0] = committed[:slot0]
            hi[:slot0] = committed[:slot0]
            lo_kwh = float(lo.sum()) * dt
            hi_kwh = float(hi.sum()) * dt
            energy = session.energy_kwh
            if energy < lo_kwh - 1e-9 or energy > hi_kwh + 1e-9:
                clamped = min(max(energy, lo_kwh), hi_kwh)
                flags.append(
                    f"step {tau}: session {ev_id} energy target {energy!r} kWh "
                    f"outside reachable [{lo_kwh!r}, {hi_kwh!r}]; "
                    f"clamped to {clamped!r}"
                )
                energy = clamped
            tasks.append(StationTask(ev_id, session.bus_id, lo, hi, energy))
            if ev_id in profiles:
                init[k] = profiles[ev_id]

        initial_signal = carried if not changed else None
        if transport is not None:
            result = run_with_transport(config, base_load_mw, tasks, transport,
                                        init, initial_signal)
        else:
            result = run_fixed_point(config, base_load_mw, tasks, init,
                                     initial_signal)
        if not result.trace.converged:
            flags.append(
                f"step {tau}: fixed point not converged after "
                f"{result.trace.iterations} iterations "
                f"(residual {result.trace.residuals[-1]!r})"
            )
        step_traces.append(result.trace)
        carried = result.signal

        for k, ev_id in enumerate(active_ids):
            profiles[ev_id] = result.profiles_kw[k]
            state.committed_kw[ev_id][slot0:slot1] = result.profiles_kw[k][slot0:slot1]
            state.delivered_kwh[ev_id] += (
                float(result.profiles_kw[k][slot0:slot1].sum()) * dt
            )

    ev_ids = tuple(sorted(state.committed_kw))
    committed = np.zeros((len(ev_ids), t))
    for k, ev_id in enumerate(ev_ids):
        committed[k] = state.committed_kw[ev_id]
    state.tau = steps
    return HorizonResult(
        ev_ids=ev_ids,
        bus_ids=dict(bus_ids),
        committed_kw=committed,
        step_traces=tuple(step_traces),
        flags=tuple(flags),
        state=state,
    )
