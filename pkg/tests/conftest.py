import time
from pathlib import Path

import numpy as np
import pytest

from rdvmpc import models, ocp, sim, terminal

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"

QUAD_Q = np.diag([30.0, 30.0, 6.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
QUAD_R = np.eye(4)
BOAT_Q = np.diag([5.0, 5.0, 1.0, 1.0, 1.0, 1.0])
BOAT_R = np.eye(3)


def planar_double_integrator(u_max=0.4, agent_id=90):
    A = np.zeros((4, 4))
    A[0, 2] = A[1, 3] = 1.0
    B = np.zeros((4, 2))
    B[2, 0] = B[3, 1] = 1.0
    C = np.zeros((3, 4))
    C[0, 0] = C[1, 1] = 1.0
    return models.linear_model(
        A, B, C, agent_id=agent_id,
        input_constraints=models.ConstraintSet([-u_max, -u_max], [u_max, u_max]),
    )


@pytest.fixture(scope="session")
def quad():
    return models.quadcopter_model()


@pytest.fixture(scope="session")
def boat():
    return models.boat_model()


@pytest.fixture(scope="session")
def quad_ingredients(quad):
    return terminal.synthesize(quad, QUAD_Q, QUAD_R, seed=0)


@pytest.fixture(scope="session")
def boat_ingredients(boat):
    return terminal.synthesize(boat, BOAT_Q, BOAT_R, seed=0)


def make_toy_spec(horizon_T=3.0, dt=0.1, terminal_constraint=False, u_max=1e9, Q=None, R=None):
    toy = planar_double_integrator(u_max=u_max)
    Q = np.eye(4) if Q is None else Q
    R = np.eye(2) if R is None else R
    ing = terminal.synthesize(toy, Q, R, alpha_max=100.0, n_samples=2000, seed=0)
    return ocp.DocpSpec(model=toy, ingredients=ing, Q=Q, R=R, horizon_T=horizon_T, dt=dt,
                        terminal_constraint_enabled=terminal_constraint)


def scenario(name: str, overrides=None) -> sim.ScenarioConfig:
    return sim.load_config(SCENARIOS / f"{name}.toml", overrides)


@pytest.fixture(scope="session")
def nominal_log():
    cfg = scenario("nominal_terminal")
    t0 = time.perf_counter()
    tlog = sim.run_scenario(cfg)
    tlog.summary["_wall_time"] = time.perf_counter() - t0
    return tlog


@pytest.fixture(scope="session")
def wind_on_log():
    cfg = scenario("wind_terminal")
    return sim.run_scenario(cfg)


@pytest.fixture(scope="session")
def wind_off_log():
    cfg = scenario("wind_no_terminal")
    return sim.run_scenario(cfg)


@pytest.fixture(scope="session")
def toy_log():
    cfg = scenario("toy_negotiation")
    return sim.run_scenario(cfg)


@pytest.fixture(scope="session")
def start_at_theta_log():
    cfg = scenario("start_at_theta")
    return sim.run_scenario(cfg)
