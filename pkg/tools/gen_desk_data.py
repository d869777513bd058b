"""Regenerate the bundled desk-scale scenario data.

Writes base_load.csv, sessions.csv, and events.csv under
src/evgrid/data/desk/.  The base load is a smooth daily curve with an early
peak and a deep mid-horizon valley; sessions come from the same fleet spec
that config.json carries, so `evgrid gen-fleet` reproduces sessions.csv
byte for byte.
"""

import json
from pathlib import Path

import numpy as np

from evgrid import coordinator, fleet, metrics

DESK = Path(__file__).resolve().parents[1] / "src" / "evgrid" / "data" / "desk"

BASE_PEAK_MW = 167.0
SHARES = {5: 0.42, 7: 0.08, 9: 0.50}


def base_curve(slots: int = 96) -> np.ndarray:
    t = np.arange(slots, dtype=float)
    shape = (
        0.58
        + 0.38 * np.exp(-((t - 21.0) ** 2) / 128.0)   # morning-side peak
        - 0.20 * np.exp(-((t - 45.0) ** 2) / 288.0)   # midday valley
        + 0.10 * np.exp(-((t - 78.0) ** 2) / 162.0)   # evening shoulder
    )
    return BASE_PEAK_MW * shape / shape.max()


def main() -> None:
    DESK.mkdir(parents=True, exist_ok=True)
    system = base_curve()
    bus_ids = tuple(sorted(SHARES))
    mw = np.vstack([SHARES[b] * system for b in bus_ids])
    metrics.write_base_load(DESK / "base_load.csv", metrics.BaseLoadProfile(bus_ids, mw))

    with open(DESK / "config.json", "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    raw = dict(cfg["fleet"])
    raw["counts"] = {int(k): int(v) for k, v in raw["counts"].items()}
    raw["energy_kwh_range"] = tuple(raw["energy_kwh_range"])
    spec = fleet.FleetSpec(slots=cfg["scheduler"]["slots"],
                           slot_hours=cfg["scheduler"]["slot_hours"], **raw)
    scenario = fleet.generate_fleet(cfg["seed"], spec)
    fleet.write_sessions(DESK / "sessions.csv", scenario.sessions)

    events = [
        coordinator.ScriptedEvent(slot=25, kind="add_session", ev_id="late5a",
                                  bus_id=5, t_start=26, t_end=84,
                                  energy_kwh=160.0, p_max_kw=200.0, d_max_kw=-200.0),
        coordinator.ScriptedEvent(slot=25, kind="add_session", ev_id="late7a",
                                  bus_id=7, t_start=27, t_end=88,
                                  energy_kwh=140.0, p_max_kw=200.0, d_max_kw=-200.0),
        coordinator.ScriptedEvent(slot=25, kind="add_session", ev_id="late9a",
                                  bus_id=9, t_start=26, t_end=90,
                                  energy_kwh=180.0, p_max_kw=200.0, d_max_kw=-200.0),
        coordinator.ScriptedEvent(slot=40, kind="update_energy", ev_id="b5e0000",
                                  energy_kwh=190.0),
        coordinator.ScriptedEvent(slot=40, kind="update_energy", ev_id="b9e0010",
                                  energy_kwh=175.0),
        coordinator.ScriptedEvent(slot=40, kind="remove_session", ev_id="b7e0003"),
    ]
    coordinator.write_events(DESK / "events.csv", events)
    print(f"wrote desk data under {DESK}")
    print(f"base: peak {system.max():.2f} MW, mean {system.mean():.2f} MW, "
          f"energy {system.sum() * 0.25:.1f} MWh")


if __name__ == "__main__":
    main()
