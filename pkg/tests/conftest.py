import os

import pytest
from hypothesis import HealthCheck, settings

from gridgame.grid import ieee14

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def case14():
    return ieee14()


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """The default desk-scale training run, shared by every test that needs trained policies."""
    from gridgame.agents import save_policy
    from gridgame.training import TrainConfig, train

    cfg = TrainConfig()
    res = train(cfg)
    d = tmp_path_factory.mktemp("policies")
    save_policy(res.attacker, d / "attacker.json")
    save_policy(res.defender, d / "defender.json")
    return cfg, res, d


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
