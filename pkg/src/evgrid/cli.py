"""Command-line entry point.

Subcommands: powerflow | schedule | simulate | compare | gen-fleet.
Configuration comes from a JSON file plus flag overrides (flags win); paths
inside the config file resolve relative to the file, flag paths relative to
the working directory.  All randomness flows from the single configured seed,
and every output is deterministic for a fixed config.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import coordinator, fileio, fleet, metrics
from .fleet import FleetError, FleetScenario, FleetSpec
from .grid import GridCaseError, build_admittance_matrix, load_grid_case
from .metrics import MetricsError, ReactiveAssumptions
from .powerflow import PowerFlowError, compute_line_flows, solve_power_flow
from .scheduler import SchedulerConfig, SchedulerError, run_until_converged

USER_ERRORS = (GridCaseError, PowerFlowError, FleetError, SchedulerError,
               coordinator.CoordinatorError, coordinator.ProtocolError,
               MetricsError, ValueError, OSError)

_CONFIG_KEYS = {
    "case", "base_load", "sessions", "events", "uncoordinated", "coordinated",
    "output_dir", "seed", "scheduler", "horizon_steps", "power_flow",
    "reactive", "pv_mw", "fleet", "slot",
}


@dataclass
class RunConfig:
    case_path: Path | None
    base_load_path: Path | None
    sessions_path: Path | None
    events_path: Path | None
    uncoordinated_path: Path | None
    coordinated_path: Path | None
    output_dir: Path
    seed: int
    scheduler: SchedulerConfig
    horizon_steps: int
    pf_tol: float
    pf_max_iter: int
    reactive: ReactiveAssumptions
    pv_mw: dict[int, float]
    fleet_spec: dict | None
    slot: int | None


def _resolve(base_dir: Path, value) -> Path | None:
    if value is None:
        return None
    path = Path(value)
    return path if path.is_absolute() else base_dir / path


def load_run_config(config_path: str | None, overrides: dict) -> RunConfig:
    raw: dict = {}
    base_dir = Path.cwd()
    if config_path:
        config_path = Path(config_path)
        with open(config_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        unknown = sorted(set(raw) - _CONFIG_KEYS)
        if unknown:
            raise ValueError(f"{config_path}: unknown config keys {unknown}")
        base_dir = config_path.parent

    def path_of(key: str) -> Path | None:
        if overrides.get(key) is not None:
            return _resolve(Path.cwd(), overrides[key])
        return _resolve(base_dir, raw.get(key))

    sched_raw = dict(raw.get("scheduler", {}))
    if "lambda" in sched_raw:
        sched_raw["lam"] = sched_raw.pop("lambda")
    for key in ("lam", "epsilon", "max_iterations", "workers"):
        if overrides.get(key) is not None:
            sched_raw[key] = overrides[key]
    scheduler = SchedulerConfig(**sched_raw)

    pf_raw = raw.get("power_flow", {})
    reactive_raw = raw.get("reactive", {})
    pv_raw = raw.get("pv_mw", {})

    steps = overrides.get("steps")
    if steps is None:
        steps = raw.get("horizon_steps", 24)
    seed = overrides.get("seed")
    if seed is None:
        seed = raw.get("seed", 1)
    slot = overrides.get("slot")
    if slot is None:
        slot = raw.get("slot")

    if overrides.get("output") is not None:
        output_dir = _resolve(Path.cwd(), overrides["output"])
    elif raw.get("output_dir") is not None:
        output_dir = _resolve(base_dir, raw["output_dir"])
    else:
        output_dir = Path.cwd() / "out"

    cfg = RunConfig(
        case_path=path_of("case"),
        base_load_path=path_of("base_load"),
        sessions_path=path_of("sessions"),
        events_path=path_of("events"),
        uncoordinated_path=path_of("uncoordinated"),
        coordinated_path=path_of("coordinated"),
        output_dir=output_dir,
        seed=int(seed),
        scheduler=scheduler,
        horizon_steps=int(steps),
        pf_tol=float(pf_raw.get("tol", 1e-8)),
        pf_max_iter=int(pf_raw.get("max_iter", 20)),
        reactive=ReactiveAssumptions(**reactive_raw),
        pv_mw={int(k): float(v) for k, v in pv_raw.items()},
        fleet_spec=raw.get("fleet"),
        slot=None if slot is None else int(slot),
    )
    for name, path in (("case", cfg.case_path), ("base_load", cfg.base_load_path),
                       ("sessions", cfg.sessions_path), ("events", cfg.events_path),
                       ("uncoordinated", cfg.uncoordinated_path),
                       ("coordinated", cfg.coordinated_path)):
        if path is not None and not path.exists():
            raise ValueError(f"{name} file not found: {path}")
    return cfg


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, f"{n}_path") is None]
    if missing:
        raise ValueError(f"missing required input(s): {', '.join(missing)}")


def _load_sessions(cfg: RunConfig) -> FleetScenario:
    sched = cfg.scheduler
    if cfg.sessions_path is not None:
        sessions = sorted(fleet.read_sessions(cfg.sessions_path),
                          key=lambda s: s.ev_id)
        return FleetScenario(tuple(sessions), sched.slots, sched.slot_hours)
    if cfg.fleet_spec is not None:
        return fleet.generate_fleet(cfg.seed, _fleet_spec(cfg))
    raise ValueError("config provides neither sessions nor a fleet spec")


def _fleet_spec(cfg: RunConfig) -> FleetSpec:
    raw = dict(cfg.fleet_spec or {})
    if not raw:
        raise ValueError("config has no fleet spec")
    raw.setdefault("slots", cfg.scheduler.slots)
    raw.setdefault("slot_hours", cfg.scheduler.slot_hours)
    raw["counts"] = {int(k): int(v) for k, v in raw.get("counts", {}).items()}
    if "energy_kwh_range" in raw:
        raw["energy_kwh_range"] = tuple(raw["energy_kwh_range"])
    return FleetSpec(**raw)


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _profiles_by_bus(bus_ids, profiles_kw):
    return list(zip(bus_ids, profiles_kw))


def cmd_powerflow(cfg: RunConfig) -> int:
    _require(cfg, "case")
    case = load_grid_case(cfg.case_path)
    if cfg.base_load_path is not None:
        base = metrics.read_base_load(cfg.base_load_path)
        base.validate_against(case)
        loads = metrics.ScenarioLoads(base.bus_ids, base.mw, np.zeros_like(base.mw))
        slot = cfg.slot if cfg.slot is not None else int(np.argmax(loads.system_total()))
        solution, flows = metrics.evaluate_grid_at_slot(
            case, loads, slot, cfg.reactive, cfg.pv_mw,
            tol=cfg.pf_tol, max_iter=cfg.pf_max_iter,
        )
    else:
        slot = None
        ybus = build_admittance_matrix(case)
        solution = solve_power_flow(case, ybus, tol=cfg.pf_tol,
                                    max_iter=cfg.pf_max_iter)
        flows = compute_line_flows(solution, case)

    payload = {
        "slot": slot,
        "iterations": solution.iterations,
        "max_mismatch": solution.max_mismatch,
        "buses": [
            {
                "id": bus.id,
                "kind": bus.kind.value,
                "v_mag_pu": float(solution.v_mag[i]),
                "v_angle_deg": math.degrees(float(solution.v_angle[i])),
                "p_mw": float(solution.p_inj[i]) * case.s_base,
                "q_mvar": float(solution.q_inj[i]) * case.s_base,
            }
            for i, bus in enumerate(case.buses)
        ],
        "branches": [
            {
                "from_bus": f.branch.from_bus,
                "to_bus": f.branch.to_bus,
                "i_from_a": f.i_from_amps,
                "p_from_mw": f.s_from_mva.real,
                "q_from_mvar": f.s_from_mva.imag,
                "loss_mw": f.loss_mva.real,
            }
            for f in flows
        ],
    }
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.output_dir / "powerflow.json", payload)

    print(f"converged in {solution.iterations} iterations, "
          f"max mismatch {solution.max_mismatch:.3e} pu")
    print(f"{'bus':<5}{'kind':<7}{'v (pu)':>9}{'angle (deg)':>13}"
          f"{'P (MW)':>10}{'Q (MVAr)':>10}")
    for row in payload["buses"]:
        print(f"{row['id']:<5}{row['kind']:<7}{row['v_mag_pu']:>9.4f}"
              f"{row['v_angle_deg']:>13.3f}{row['p_mw']:>10.2f}"
              f"{row['q_mvar']:>10.2f}")
    print(f"{'branch':<9}{'I from (A)':>12}{'P from (MW)':>13}{'loss (MW)':>11}")
    for row in payload["branches"]:
        label = "{}-{}".format(row["from_bus"], row["to_bus"])
        print(f"{label:<9}{row['i_from_a']:>12.1f}"
              f"{row['p_from_mw']:>13.2f}{row['loss_mw']:>11.4f}")
    return 0


def _uncoordinated_matrix(scenario: FleetScenario) -> np.ndarray:
    rows = np.zeros((len(scenario.sessions), scenario.slots_per_horizon))
    for n, session in enumerate(scenario.sessions):
        rows[n] = fleet.uncoordinated_profile(
            session, scenario.slots_per_horizon, scenario.slot_hours
        )
    return rows


def cmd_schedule(cfg: RunConfig) -> int:
    _require(cfg, "case", "base_load")
    case = load_grid_case(cfg.case_path)
    base = metrics.read_base_load(cfg.base_load_path)
    base.validate_against(case)
    scenario = _load_sessions(cfg)
    scenario.validate_buses({b.id for b in case.buses})
    if base.slots != cfg.scheduler.slots:
        raise ValueError(
            f"base load has {base.slots} slots, scheduler expects {cfg.scheduler.slots}"
        )

    base_total = base.mw.sum(axis=0)
    profiles, trace = run_until_converged(cfg.scheduler, base_total,
                                          list(scenario.sessions))

    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    ev_ids = [s.ev_id for s in scenario.sessions]
    bus_ids = [s.bus_id for s in scenario.sessions]
    fileio.write_schedules(cfg.output_dir / "schedules_coordinated.csv",
                           ev_ids, bus_ids, profiles)
    fileio.write_traces(cfg.output_dir / "traces.csv", [trace])

    status = "converged" if trace.converged else "did not converge"
    print(f"{status} after {trace.iterations} iterations; "
          f"objective {trace.objectives[0]:.3f} -> {trace.objectives[-1]:.3f} MW^2")
    for line in trace.diagnostics:
        print(f"note: {line}")
    return 0


def cmd_simulate(cfg: RunConfig) -> int:
    _require(cfg, "case", "base_load")
    case = load_grid_case(cfg.case_path)
    base = metrics.read_base_load(cfg.base_load_path)
    base.validate_against(case)
    scenario = _load_sessions(cfg)
    scenario.validate_buses({b.id for b in case.buses})
    if base.slots != cfg.scheduler.slots:
        raise ValueError(
            f"base load has {base.slots} slots, scheduler expects {cfg.scheduler.slots}"
        )
    events = (coordinator.read_events(cfg.events_path)
              if cfg.events_path is not None else [])

    uncoordinated = _uncoordinated_matrix(scenario)
    unc_ids = [s.ev_id for s in scenario.sessions]
    unc_buses = [s.bus_id for s in scenario.sessions]

    base_total = base.mw.sum(axis=0)
    result = coordinator.run_receding_horizon(
        cfg.scheduler, base_total, scenario, cfg.horizon_steps, events
    )
    coord_buses = [result.bus_ids[e] for e in result.ev_ids]

    report = metrics.compare_scenarios(
        case, base,
        _profiles_by_bus(unc_buses, uncoordinated),
        _profiles_by_bus(coord_buses, result.committed_kw),
        cfg.reactive, cfg.pv_mw, flags=result.flags,
        tol=cfg.pf_tol, max_iter=cfg.pf_max_iter,
    )

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_schedules(out / "schedules_uncoordinated.csv",
                           unc_ids, unc_buses, uncoordinated)
    fileio.write_schedules(out / "schedules_coordinated.csv",
                           list(result.ev_ids), coord_buses, result.committed_kw)
    fileio.write_traces(out / "traces.csv", result.step_traces)
    _write_json(out / "report.json", metrics.report_to_dict(report))
    text = metrics.render_report(report)
    with open(out / "report.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)

    loads_unc = metrics.aggregate_load(base, _profiles_by_bus(unc_buses, uncoordinated))
    loads_coord = metrics.aggregate_load(
        base, _profiles_by_bus(coord_buses, result.committed_kw)
    )
    fileio.write_system_aggregate(
        out / "system_load.csv", base_total,
        loads_unc.system_total(), loads_coord.system_total(),
    )
    def by_bus(loads):
        return {bus: loads.total_mw[k] for k, bus in enumerate(loads.bus_ids)}

    fileio.write_bus_aggregate(
        out / "bus_load.csv", list(base.bus_ids),
        {bus: base.mw[k] for k, bus in enumerate(base.bus_ids)},
        by_bus(loads_unc), by_bus(loads_coord),
    )

    print(text, end="")
    return 0


def cmd_compare(cfg: RunConfig) -> int:
    _require(cfg, "case", "base_load", "uncoordinated", "coordinated")
    case = load_grid_case(cfg.case_path)
    base = metrics.read_base_load(cfg.base_load_path)
    base.validate_against(case)
    unc_ids, unc_buses, unc_kw = fileio.read_schedules(cfg.uncoordinated_path)
    coord_ids, coord_buses, coord_kw = fileio.read_schedules(cfg.coordinated_path)

    report = metrics.compare_scenarios(
        case, base,
        _profiles_by_bus(unc_buses, unc_kw),
        _profiles_by_bus(coord_buses, coord_kw),
        cfg.reactive, cfg.pv_mw,
        tol=cfg.pf_tol, max_iter=cfg.pf_max_iter,
    )
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.output_dir / "report.json", metrics.report_to_dict(report))
    text = metrics.render_report(report)
    with open(cfg.output_dir / "report.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def cmd_gen_fleet(cfg: RunConfig) -> int:
    scenario = fleet.generate_fleet(cfg.seed, _fleet_spec(cfg))
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.output_dir / "sessions.csv"
    fleet.write_sessions(path, scenario.sessions)
    print(f"wrote {len(scenario.sessions)} sessions")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evgrid",
        description="Bi-directional EV charging coordination on a 9-bus grid",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "powerflow": cmd_powerflow,
        "schedule": cmd_schedule,
        "simulate": cmd_simulate,
        "compare": cmd_compare,
        "gen-fleet": cmd_gen_fleet,
    }
    for name, handler in commands.items():
        p = sub.add_parser(name)
        p.set_defaults(handler=handler)
        p.add_argument("-c", "--config", help="JSON configuration file")
        p.add_argument("--case", help="grid case file")
        p.add_argument("--base-load", dest="base_load", help="base load CSV")
        p.add_argument("--sessions", help="EV sessions CSV")
        p.add_argument("--events", help="scripted events CSV")
        p.add_argument("--uncoordinated", help="uncoordinated schedules CSV")
        p.add_argument("--coordinated", help="coordinated schedules CSV")
        p.add_argument("-o", "--output", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--max-iterations", dest="max_iterations", type=int)
        p.add_argument("--steps", type=int, help="horizon steps")
        p.add_argument("--workers", type=int)
        p.add_argument("--slot", type=int, help="snapshot slot for powerflow")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {
        key: getattr(args, key, None)
        for key in ("case", "base_load", "sessions", "events", "uncoordinated",
                    "coordinated", "output", "seed", "lam", "epsilon",
                    "max_iterations", "steps", "workers", "slot")
    }
    try:
        cfg = load_run_config(args.config, overrides)
        return args.handler(cfg)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
