import pytest

from demotesim.cache import BACKENDS
from demotesim.config import MachineConfig, build_config
from demotesim.machine import Machine


@pytest.fixture
def machine():
    return Machine(seed=7)


@pytest.fixture
def quiet_machine():
    """Machine with noise switched off: every latency is the table mean."""
    return Machine(build_config({"noise.sigma": 0}), seed=7)


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    return request.param


def small_config(**over) -> MachineConfig:
    values = {"hierarchy.cores": 3}
    values.update(over)
    return build_config(values)


# one line per acceptance criterion, shown at the end of the run
ACCEPTANCE: dict = {}


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
