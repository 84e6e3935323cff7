import numpy as np
import pytest

from eitproj.forward import ContactState, assemble, make_patterns, solve
from eitproj.mesh import ElectrodeSpec, generate_cylinder_tank


@pytest.fixture(scope="session")
def small_tank():
    """Small 8-electrode tank (~900 nodes) for fast unit tests."""
    return generate_cylinder_tank(0.05, 0.03, ElectrodeSpec(8, 0.004), refinement_level=0)


@pytest.fixture(scope="session")
def tiny_tank():
    """4-electrode tank with fewer than 500 nodes."""
    return generate_cylinder_tank(0.05, 0.03, ElectrodeSpec(4, 0.005), refinement_level=0)


@pytest.fixture(scope="session")
def small_forward(small_tank):
    mesh, layout = small_tank
    contact = ContactState.uniform(300.0, layout)
    rng = np.random.default_rng(3)
    sigma = 0.2 * np.exp(0.3 * rng.standard_normal(mesh.n_nodes))
    system = assemble(mesh, layout, sigma, contact)
    return solve(system, make_patterns("adjacent", layout.M))


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line per acceptance criterion, then assert it."""
    lines = request.config.stash[_VERDICTS]

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
