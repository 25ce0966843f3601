import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def ieee33():
    from voltgrid.grid import load_network

    return load_network("ieee33")


@pytest.fixture(scope="session")
def two_bus():
    from voltgrid.grid import load_network

    return load_network("two_bus")


@pytest.fixture(scope="session")
def desk():
    from voltgrid.data import load_scenario

    return load_scenario("desk_33bus")


@pytest.fixture(scope="session")
def smoke():
    from voltgrid.data import load_scenario

    return load_scenario("smoke_2bus")


def pytest_terminal_summary(terminalreporter):
    from checks import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
