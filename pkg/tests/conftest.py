import numpy as np
import pytest

import helpers


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if helpers.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(helpers.ACCEPTANCE, key=lambda s: int(s[6:8])):
            terminalreporter.write_line(line)
