"""Shared fixtures: default vehicle parameters and tracks."""

import math
import sys

import numpy as np
import pytest

from gpmpcc.config import DATA_DIR, load_toml
from gpmpcc.track import build_track, load_track
from gpmpcc.vehicle import VehicleParams


@pytest.fixture(scope="session")
def params() -> VehicleParams:
    return VehicleParams.from_dict(load_toml(DATA_DIR / "vehicle_default.toml"))


@pytest.fixture(scope="session")
def demo_track():
    return load_track(DATA_DIR / "demo_track.toml")


def circle_waypoints(R: float, n: int) -> np.ndarray:
    a = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    return np.column_stack([R * np.cos(a), R * np.sin(a)])


@pytest.fixture(scope="session")
def circle_track():
    return build_track(circle_waypoints(1.0, 16), 0.2, closed=True)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
