import numpy as np
import pytest

from rvcsim.engine import SimConfig, SimulationEngine
from rvcsim.eye_sim import Scenario
from rvcsim.robot import RcmRegistration, RobotModel


@pytest.fixture
def model():
    return RobotModel()


@pytest.fixture
def rcm():
    return RcmRegistration(point=np.array([0.0, 0.0, 12.0]))


@pytest.fixture
def scenario():
    return Scenario.default()


def make_engine(scenario=None, seed=0, record=True, **config_overrides):
    scenario = scenario or Scenario.default()
    config = SimConfig(**config_overrides)
    return SimulationEngine(scenario, config, seed=seed, record=record)


GOLDEN_ACTIONS = [
    (0.0, {"type": "key", "key": "D", "action": "down"}),
    (9.545, {"type": "key", "key": "D", "action": "up"}),
    (9.60, {"type": "confirm_contact"}),
    (9.62, {"type": "key", "key": "P", "action": "down"}),
    (9.70, {"type": "key", "key": "P", "action": "up"}),
    (9.75, {"type": "key", "key": "R", "action": "down"}),
    (10.95, {"type": "key", "key": "R", "action": "up"}),
    (11.05, {"type": "declare_verification", "passed": True}),
    (11.10, {"type": "begin_infusion"}),
]


def drive(engine, actions, until=None):
    """Feed timed protocol messages, then run to `until` or to termination."""
    for at, message in actions:
        engine.run_until(at)
        if engine.workflow.terminal:
            break
        engine.ingest(message)
    if until is not None:
        engine.run_until(until)
    else:
        while not engine.workflow.terminal and engine.t < engine.config.timeout_s:
            engine.tick()
    return engine


def golden_engine(scenario=None, seed=0, retract_after=71.5, **config_overrides):
    """Run the nominal successful trial; returns the finished engine."""
    engine = make_engine(scenario, seed=seed, **config_overrides)
    actions = GOLDEN_ACTIONS + [
        (retract_after, {"type": "key", "key": "R", "action": "down"}),
    ]
    return drive(engine, actions)
