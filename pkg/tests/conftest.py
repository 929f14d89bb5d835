import numpy as np
import pytest

from loopfit import sdf_diffusion as sd
from loopfit import synth

_LINES = []


@pytest.fixture(scope="session")
def toy_model():
    return synth.make_toy_model(synth.SynthSpec())


@pytest.fixture(scope="session")
def grid32(toy_model):
    return sd.build_grid(toy_model, resolution=32)


@pytest.fixture(scope="session")
def grid64(toy_model):
    return sd.build_grid(toy_model, resolution=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_line():
    """Record a one-line verdict; all lines are repeated in the terminal summary."""

    def record(number, ok, detail):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        print(line)
        _LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
