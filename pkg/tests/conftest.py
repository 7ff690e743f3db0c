import numpy as np
import pytest

from delayfb.model import FeedbackConfig, PlantModel, assemble_ddae, case_study


def scalar_system(a=0.0, b=1.0, c=1.0, tau_u=0.0, delays=(1.0,), n_c=0):
    """``xdot = a x + b u(t - tau_u)``, ``y = c x``."""
    plant = PlantModel([[a]], [[b]], [[1.0]], [[c]], [[1.0]], tau_u)
    return assemble_ddae(plant, FeedbackConfig(delays, n_c))


def random_plant(rng, n=4, n_y=2, tau_u=0.01):
    A = rng.normal(size=(n, n)) - 2.0 * np.eye(n)
    return PlantModel(A, rng.normal(size=(n, 1)), rng.normal(size=(n, 1)),
                      rng.normal(size=(n_y, n)), rng.normal(size=(1, n)), tau_u)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def case0():
    return case_study(0)


ACCEPTANCE: dict = {}


def record(criterion: str, passed: bool, detail: str) -> None:
    """Store one acceptance line; printed in the terminal summary."""
    prev = ACCEPTANCE.get(criterion)
    if prev is not None:
        passed = passed and prev[0]
        detail = f"{prev[1]}; {detail}"
    ACCEPTANCE[criterion] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if passed else 'FAIL'} | {detail}")
