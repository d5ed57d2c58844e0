import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mtl_degradation.dataprep import synth_fleet
from mtl_degradation.seqmodel import ModelConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def fleet():
    return synth_fleet(48, seed=0)


@pytest.fixture
def tiny_config():
    return ModelConfig(num_layers=2, hidden_size=4, input_len=12, output_len=6, in_step_cycles=10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
