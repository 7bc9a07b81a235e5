import numpy as np
import pytest

from care.synthetic import DatasetManifest, default_regions, make_dataset


@pytest.fixture(scope="session")
def small_dataset():
    """3 regions x 12 tiles, enough for split/n-shot/CLI tests."""
    manifest = DatasetManifest(global_seed=3, tiles_per_region=12, regions=default_regions()[:3])
    return make_dataset(manifest)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one "PASS/FAIL criterion N: ..." line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":").rstrip("abc"))):
            terminalreporter.write_line(line)
