"""Shared delimited-file helpers with bit-exact float round-tripping.

Every writer in the package formats floats with ``repr`` (shortest string
that parses back to the same double), so rerunning a deterministic pipeline
produces byte-identical files.
"""

from __future__ import annotations

import os

import numpy as np


def fmt(x) -> str:
    """Canonical text form: shortest exact representation for floats."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_rows(path: str | os.PathLike, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_rows(path: str | os.PathLike, expected_header: list[str]) -> list[list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in lines[0].split(",")]
    if header != expected_header:
        raise ValueError(f"{path}: expected header {expected_header}, got {header}")
    return [ln.split(",") for ln in lines[1:]]


# --- schedules: one row per EV, wide slot columns ---------------------------

def write_schedules(path, ev_ids: list[str], bus_ids: list[int],
                    profiles_kw: np.ndarray) -> None:
    """Per-EV charging profiles in kW; one column per slot."""
    slots = profiles_kw.shape[1] if len(ev_ids) else 0
    header = ["ev_id", "bus_id"] + [f"kw_{t}" for t in range(slots)]
    rows = (
        [ev_ids[n], bus_ids[n]] + list(profiles_kw[n])
        for n in range(len(ev_ids))
    )
    write_rows(path, header, rows)


def read_schedules(path) -> tuple[list[str], list[int], np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    if header[:2] != ["ev_id", "bus_id"]:
        raise ValueError(f"{path}: not a schedules file")
    slots = len(header) - 2
    ev_ids, bus_ids, rows = [], [], []
    for ln in lines[1:]:
        cols = ln.split(",")
        ev_ids.append(cols[0])
        bus_ids.append(int(cols[1]))
        rows.append([float(v) for v in cols[2:]])
    profiles = np.array(rows, dtype=float) if rows else np.zeros((0, slots))
    return ev_ids, bus_ids, profiles


# --- convergence traces ------------------------------------------------------

def write_traces(path, traces) -> None:
    """Traces for consecutive horizon steps; step index is 1-based."""
    rows = []
    for step, trace in enumerate(traces, start=1):
        for it, (residual, objective) in enumerate(zip(trace.residuals, trace.objectives)):
            rows.append([step, it, residual, objective])
    write_rows(path, ["step", "iteration", "residual", "objective"], rows)


# --- plot-ready aggregates ---------------------------------------------------

def write_system_aggregate(path, base_mw, uncoordinated_mw, coordinated_mw) -> None:
    rows = (
        [t, base_mw[t], uncoordinated_mw[t], coordinated_mw[t]]
        for t in range(len(base_mw))
    )
    write_rows(path, ["slot", "base_mw", "uncoordinated_total_mw", "coordinated_total_mw"], rows)


def write_bus_aggregate(path, bus_ids, base_by_bus, unc_by_bus, coord_by_bus) -> None:
    rows = []
    for bus in bus_ids:
        for t in range(len(base_by_bus[bus])):
            rows.append([bus, t, base_by_bus[bus][t], unc_by_bus[bus][t], coord_by_bus[bus][t]])
    write_rows(
        path,
        ["bus_id", "slot", "base_mw", "uncoordinated_total_mw", "coordinated_total_mw"],
        rows,
    )
