"""Shared fixtures: bundled case data, desk scenario paths, small builders."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from evgrid import grid
from evgrid.fleet import EvSession
from evgrid.scheduler import SchedulerConfig

DATA_DIR = Path(str(resources.files("evgrid") / "data"))
DESK_DIR = DATA_DIR / "desk"


@pytest.fixture(scope="session")
def wscc_case() -> grid.GridCase:
    return grid.load_grid_case(DATA_DIR / "wscc9.case")


@pytest.fixture(scope="session")
def wscc_ybus(wscc_case) -> np.ndarray:
    return grid.build_admittance_matrix(wscc_case)


@pytest.fixture(scope="session")
def desk_config_path() -> Path:
    return DESK_DIR / "config.json"


UNITY_CASE_TEXT = """
[system]
s_base_mva = 100.0

[buses]
1  swing  1.0  0.0  0.0  0.0  230.0
2  pq     1.0  0.0  0.0  0.0  230.0
3  pq     1.0  0.0  0.0  0.0  230.0

[branches]
1  2  0.01  0.1  0.0  1.0
2  3  0.01  0.1  0.0  1.0
"""


@pytest.fixture()
def unity_case() -> grid.GridCase:
    """Three buses at 1.0 pu setpoints, no load: flat start is the solution."""
    return grid.parse_grid_case(UNITY_CASE_TEXT, name="unity")


def two_bus_case(p_inj_mw: float = -50.0, q_inj_mvar: float = 0.0,
                 x: float = 0.1, r: float = 0.0, b: float = 0.0) -> grid.GridCase:
    """Swing at 1 angle 0 feeding one PQ bus over a single branch."""
    text = f"""
[system]
s_base_mva = 100.0

[buses]
1  swing  1.0  0.0  0.0  0.0  230.0
2  pq     1.0  0.0  {p_inj_mw}  {q_inj_mvar}  230.0

[branches]
1  2  {r}  {x}  {b}  1.0
"""
    return grid.parse_grid_case(text, name="two-bus")


def make_session(ev_id: str = "ev1", bus_id: int = 5, t_start: int = 2,
                 t_end: int = 10, energy_kwh: float = 10.0,
                 p_max_kw: float = 6.6, d_max_kw: float = -6.6) -> EvSession:
    return EvSession(ev_id, bus_id, t_start, t_end, energy_kwh, p_max_kw, d_max_kw)


def small_config(**kwargs) -> SchedulerConfig:
    defaults = dict(lam=2.0, epsilon=1e-6, max_iterations=500,
                    slots=16, slot_hours=0.25)
    defaults.update(kwargs)
    return SchedulerConfig(**defaults)
