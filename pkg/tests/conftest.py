import numpy as np
import pytest

from idic.mesh import build_unit_square_mesh


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mesh4():
    return build_unit_square_mesh(4)


@pytest.fixture(scope="session")
def mesh8():
    return build_unit_square_mesh(8)


_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Print one PASS/FAIL line for an acceptance criterion and return the verdict."""

    def report(num, name, ok, detail=""):
        line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
        print(line)
        _CRITERIA.append(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
