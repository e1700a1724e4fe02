import warnings

import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][2:])):
        terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _quiet_epsilon_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="epsilon=.*below half a grid step")
        yield
