import numpy as np
import pytest

from rlmcmc.fem import Box, ProblemSpec, SourceSpec
from rlmcmc.harness.experiments import EXP1_SOURCES
from rlmcmc.mesh import build_hierarchy


@pytest.fixture(scope="session")
def g20():
    return build_hierarchy(20, 4)


@pytest.fixture(scope="session")
def g40():
    return build_hierarchy(40, 8)


@pytest.fixture(scope="session")
def exp1_spec():
    return ProblemSpec(source=SourceSpec(tuple((Box(*b[:4]), b[4]) for b in EXP1_SOURCES)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion; the lines are repeated in the summary."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
