"""Decentralized charging coordination: control signal, per-station proximal
subproblem, and the broadcast/gather fixed-point iteration.

Unit bridge: base load is MW, per-EV profiles are kW.  The control signal is
the aggregate load scaled by 1/(lambda*N), so it carries MW-scale values.
Each station's subproblem is solved with its kW decision variables scaled by
the single configured factor ``kw_per_mw`` (default 1000), which makes the
control signal act as a dimensionless slot price in the KKT form

    p(t) = clip(previous(t) - c(t) + mu * dt, lo(t), hi(t))

with the scalar multiplier mu fixed by bisection on the energy equality.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .fleet import EvSession


class SchedulerError(ValueError):
    pass


class InfeasibleSessionError(SchedulerError):
    def __init__(self, ev_id: str, energy_kwh: float, lo_kwh: float, hi_kwh: float):
        self.ev_id = ev_id
        self.energy_kwh = energy_kwh
        self.feasible_kwh = (lo_kwh, hi_kwh)
        super().__init__(
            f"station {ev_id}: energy target {energy_kwh!r} kWh outside the "
            f"box-reachable interval [{lo_kwh!r}, {hi_kwh!r}] kWh"
        )


@dataclass(frozen=True)
class SchedulerConfig:
    lam: float = 2.0                 # control-signal tuning parameter
    epsilon: float = 1e-3            # convergence threshold on the signal, MW scale
    max_iterations: int = 200
    slots: int = 96
    slot_hours: float = 0.25
    kw_per_mw: float = 1000.0        # station decision-variable scale factor
    energy_tol_kwh: float = 1e-9     # bisection stop on the energy equality
    workers: int = 1                 # concurrent station solves per gather

    def __post_init__(self):
        if min(self.lam, self.epsilon, self.slots, self.slot_hours,
               self.kw_per_mw, self.energy_tol_kwh) <= 0:
            raise SchedulerError("scheduler parameters must all be positive")
        if self.max_iterations < 1 or self.workers < 1:
            raise SchedulerError("max_iterations and workers must be >= 1")


@dataclass(frozen=True)
class ControlSignal:
    values: np.ndarray               # length T, MW scale
    iteration: int


@dataclass(frozen=True)
class ConvergenceTrace:
    residuals: tuple[float, ...]     # inf-norm signal change; nan before the first
    objectives: tuple[float, ...]    # entry 0 at the starting profiles, then one per iteration, MW^2
    iterations: int                  # station response rounds performed
    converged: bool
    diagnostics: tuple[str, ...] = ()


@dataclass(frozen=True)
class StationTask:
    """Effective per-station subproblem: slot bounds plus the energy target.

    For a fresh session the bounds are the availability-masked rate limits;
    the receding-horizon loop additionally pins already-committed slots by
    setting lo = hi = committed value there.
    """

    ev_id: str
    bus_id: int
    lo_kw: np.ndarray
    hi_kw: np.ndarray
    energy_kwh: float


def session_bounds(session: EvSession, slots: int) -> tuple[np.ndarray, np.ndarray]:
    """Rate bounds over the horizon: the limits inside the window, 0 outside."""
    lo = np.zeros(slots)
    hi = np.zeros(slots)
    lo[session.t_start:session.t_end] = session.d_max_kw
    hi[session.t_start:session.t_end] = session.p_max_kw
    return lo, hi


def task_from_session(session: EvSession, slots: int) -> StationTask:
    lo, hi = session_bounds(session, slots)
    return StationTask(session.ev_id, session.bus_id, lo, hi, session.energy_kwh)


def aggregate_ev_mw(profiles_kw: np.ndarray, kw_per_mw: float = 1000.0) -> np.ndarray:
    """Sum of per-EV profiles in MW; rows are in fixed ev_id order."""
    if profiles_kw.shape[0] == 0:
        return np.zeros(profiles_kw.shape[1])
    return (profiles_kw / kw_per_mw).sum(axis=0)


def compute_control_signal(base_load_mw: np.ndarray, profiles_kw: np.ndarray,
                           lam: float, iteration: int = 0,
                           kw_per_mw: float = 1000.0) -> ControlSignal:
    """Scaled aggregate load broadcast to every station."""
    n = profiles_kw.shape[0]
    if n == 0:
        raise SchedulerError("control signal undefined for zero stations")
    total = base_load_mw + aggregate_ev_mw(profiles_kw, kw_per_mw)
    return ControlSignal(values=total / (lam * n), iteration=iteration)


def flattening_objective(base_load_mw: np.ndarray, profiles_kw: np.ndarray,
                         kw_per_mw: float = 1000.0) -> float:
    """Sum of squared total load over the horizon, MW^2."""
    total = base_load_mw + aggregate_ev_mw(profiles_kw, kw_per_mw)
    return float(np.sum(total * total))


def project_to_energy_box(c: np.ndarray, previous: np.ndarray, lo: np.ndarray,
                          hi: np.ndarray, energy: float, dt: float,
                          energy_tol: float = 1e-12, max_bisect: int = 200,
                          label: str = "station") -> np.ndarray:
    """Minimize sum(c*p) + 0.5*||p - previous||^2 over the box with an energy
    equality sum(p)*dt == energy.

    All arguments share one consistent unit system.  The KKT stationary form
    is p = clip(previous - c + mu*dt, lo, hi); the residual
    g(mu) = sum(p(mu))*dt - energy is continuous and nondecreasing, so mu is
    found by bisection (fixed 200-step cap, deterministic).
    """
    lo_sum = float(lo.sum()) * dt
    hi_sum = float(hi.sum()) * dt
    slack = max(energy_tol, 1e-9 * max(1.0, abs(energy)))
    if energy < lo_sum - slack or energy > hi_sum + slack:
        raise InfeasibleSessionError(label, energy, lo_sum, hi_sum)
    if energy >= hi_sum - energy_tol:
        return hi.copy()
    if energy <= lo_sum + energy_tol:
        return lo.copy()

    base = previous - c

    def residual(mu: float) -> float:
        p = np.clip(base + mu * dt, lo, hi)
        return float(p.sum()) * dt - energy

    mu_lo = float(np.min((lo - base) / dt))
    mu_hi = float(np.max((hi - base) / dt))
    # the analytic bracket already pins the residual signs; widen geometrically
    # if float rounding at the extremes ever spoils that
    width = max(mu_hi - mu_lo, 1.0)
    while residual(mu_lo) > 0.0:
        mu_lo -= width
        width *= 2.0
    while residual(mu_hi) < 0.0:
        mu_hi += width
        width *= 2.0

    mu = 0.5 * (mu_lo + mu_hi)
    for _ in range(max_bisect):
        g = residual(mu)
        if abs(g) <= energy_tol:
            break
        if g > 0.0:
            mu_hi = mu
        else:
            mu_lo = mu
        mu = 0.5 * (mu_lo + mu_hi)
    return np.clip(base + mu * dt, lo, hi)


def solve_task(signal: ControlSignal, previous_kw: np.ndarray, task: StationTask,
               config: SchedulerConfig) -> np.ndarray:
    """One station's proximal update against the broadcast signal, in kW."""
    scale = config.kw_per_mw
    try:
        p_mw = project_to_energy_box(
            c=signal.values,
            previous=previous_kw / scale,
            lo=task.lo_kw / scale,
            hi=task.hi_kw / scale,
            energy=task.energy_kwh / scale,
            dt=config.slot_hours,
            energy_tol=config.energy_tol_kwh / scale,
            label=task.ev_id,
        )
    except InfeasibleSessionError as exc:
        # the projection works on scaled values; report the interval in kWh
        raise InfeasibleSessionError(
            task.ev_id, exc.energy_kwh * scale,
            exc.feasible_kwh[0] * scale, exc.feasible_kwh[1] * scale) from None
    return p_mw * scale


def solve_station_subproblem(signal: ControlSignal, previous_kw: np.ndarray,
                             session: EvSession, config: SchedulerConfig) -> np.ndarray:
    return solve_task(signal, previous_kw, task_from_session(session, config.slots), config)


def _sequential_respond(tasks, config):
    def respond(signal, profiles_kw):
        out = np.empty_like(profiles_kw)
        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                futures = [
                    pool.submit(solve_task, signal, profiles_kw[k], tasks[k], config)
                    for k in range(len(tasks))
                ]
                for k, fut in enumerate(futures):
                    out[k] = fut.result()
        else:
            for k, task in enumerate(tasks):
                out[k] = solve_task(signal, profiles_kw[k], task, config)
        return out
    return respond


@dataclass(frozen=True)
class FixedPointResult:
    profiles_kw: np.ndarray
    trace: ConvergenceTrace
    signal: ControlSignal | None    # last computed signal; None when no stations


def run_fixed_point(config: SchedulerConfig, base_load_mw: np.ndarray,
                    tasks: list[StationTask],
                    initial_profiles: np.ndarray | None = None,
                    initial_signal: ControlSignal | None = None,
                    respond=None) -> FixedPointResult:
    """Iterate broadcast/gather until the signal residual drops below epsilon.

    When ``initial_signal`` is supplied and the first computed signal already
    matches it within epsilon the state is taken as converged with zero
    response rounds; the receding-horizon loop uses this so an unchanged
    problem re-solves to the identical profiles.
    """
    n = len(tasks)
    t = config.slots
    if initial_profiles is None:
        profiles = np.zeros((n, t))
    else:
        profiles = np.array(initial_profiles, dtype=float, copy=True)
        if profiles.shape != (n, t):
            raise SchedulerError(f"initial profiles shape {profiles.shape} != ({n}, {t})")

    objectives = [flattening_objective(base_load_mw, profiles, config.kw_per_mw)]
    if n == 0:
        # a single degenerate round: nothing to gather, base load is final
        trace = ConvergenceTrace((math.nan,), tuple(objectives), 1, True)
        return FixedPointResult(profiles, trace, None)

    if respond is None:
        respond = _sequential_respond(tasks, config)

    signal = compute_control_signal(base_load_mw, profiles, config.lam, 0, config.kw_per_mw)
    residuals: list[float] = []
    diagnostics: list[str] = []
    converged = False
    iterations = 0

    if initial_signal is not None:
        r0 = float(np.max(np.abs(signal.values - initial_signal.values)))
        residuals.append(r0)
        if r0 <= config.epsilon:
            trace = ConvergenceTrace(tuple(residuals), tuple(objectives), 0, True)
            return FixedPointResult(profiles, trace, signal)
    else:
        residuals.append(math.nan)

    while iterations < config.max_iterations:
        profiles = respond(signal, profiles)
        iterations += 1
        new_signal = compute_control_signal(
            base_load_mw, profiles, config.lam, iterations, config.kw_per_mw
        )
        residual = float(np.max(np.abs(new_signal.values - signal.values)))
        objective = flattening_objective(base_load_mw, profiles, config.kw_per_mw)
        # compare response rounds only: the starting profiles may not satisfy
        # the energy equalities yet, and restoring them can only add load
        if iterations > 1 and objective > objectives[-1] + 1e-9 * max(1.0, abs(objectives[-1])):
            diagnostics.append(
                f"flattening objective increased at iteration {iterations}: "
                f"{objectives[-1]!r} -> {objective!r}"
            )
        residuals.append(residual)
        objectives.append(objective)
        signal = new_signal
        if residual <= config.epsilon:
            converged = True
            break

    trace = ConvergenceTrace(
        residuals=tuple(residuals),
        objectives=tuple(objectives),
        iterations=iterations,
        converged=converged,
        diagnostics=tuple(diagnostics),
    )
    return FixedPointResult(profiles, trace, signal)


def run_until_converged(config: SchedulerConfig, base_load_mw: np.ndarray,
                        sessions, initial_profiles: np.ndarray | None = None,
                        respond=None) -> tuple[np.ndarray, ConvergenceTrace]:
    """Solve the one-shot coordination problem for a list of sessions (or
    prepared tasks) and return the per-EV kW profiles plus the trace.
    """
    tasks = [
        item if isinstance(item, StationTask) else task_from_session(item, config.slots)
        for item in sessions
    ]
    result = run_fixed_point(config, base_load_mw, tasks, initial_profiles,
                             respond=respond)
    return result.profiles_kw, result.trace
