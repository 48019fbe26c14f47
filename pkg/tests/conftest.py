"""Shared fixtures: reference flows are expensive, so each runs once per session."""

import time

import numpy as np
import pytest

from lagflow import flow, mesh

# criterion number -> (status, detail); filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {status}  {detail}")


def _timed_run(im, **kw):
    t0 = time.perf_counter()
    trace = flow.run(im, **kw)
    trace.wall_time = time.perf_counter() - t0
    return trace


@pytest.fixture(scope="session")
def circle_trace():
    """circle(1, 256) run to the resolution budget (about half a minute)."""
    return _timed_run(mesh.circle(1.0, 256), scenario={"name": "circle", "r0": 1.0, "N": 256})


@pytest.fixture(scope="session")
def clifford_trace():
    """clifford_torus(1, 64) run to the resolution budget."""
    return _timed_run(
        mesh.clifford_torus(1.0, 64),
        controls=flow.FlowControls(snapshot_every=20),
        scenario={"name": "clifford_torus", "r0": 1.0, "N": 64},
    )


@pytest.fixture(scope="session")
def circle_coarse_trace():
    return _timed_run(mesh.circle(1.0, 128), scenario={"name": "circle", "r0": 1.0, "N": 128})


@pytest.fixture(scope="session")
def clifford_coarse_trace():
    return _timed_run(
        mesh.clifford_torus(1.0, 32),
        controls=flow.FlowControls(snapshot_every=10),
        scenario={"name": "clifford_torus", "r0": 1.0, "N": 32},
    )


@pytest.fixture(scope="session")
def graph_trace():
    """lagrangian_graph(0.1, 0.1, 32) to t = 1 with a snapshot after every step."""
    return flow.run(
        mesh.lagrangian_graph(0.1, 0.1, 32),
        until=1.0,
        controls=flow.FlowControls(snapshot_every=1),
        scenario={"name": "lagrangian_graph"},
    )


@pytest.fixture(scope="session")
def graph_fine_trace():
    return flow.run(
        mesh.lagrangian_graph(0.1, 0.1, 64),
        until=0.2,
        controls=flow.FlowControls(snapshot_every=4),
        scenario={"name": "lagrangian_graph"},
    )


@pytest.fixture(scope="session")
def graph_short_traces():
    """Three-step runs of lagrangian_graph at N = 32, 64, 128 for convergence studies."""
    out = {}
    for N in (32, 64, 128):
        out[N] = flow.run(
            mesh.lagrangian_graph(0.1, 0.1, N),
            controls=flow.FlowControls(snapshot_every=1, max_steps=3),
            scenario={"name": "lagrangian_graph", "N": N},
        )
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
