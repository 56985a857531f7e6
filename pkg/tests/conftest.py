import numpy as np
import pytest

from matdetect.material_db import AbsorptionSpectrum, Material, MaterialDatabase, load_materials, sample_database_path


def make_db(rows) -> MaterialDatabase:
    return MaterialDatabase(tuple(Material(i, f"m{i}", AbsorptionSpectrum(tuple(r))) for i, r in enumerate(rows)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sample_db():
    return load_materials(sample_database_path())


@pytest.fixture(scope="session")
def desk_db():
    return load_materials(sample_database_path("desk_materials.txt"))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
