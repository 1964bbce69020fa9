import numpy as np
import pytest
from hypothesis import settings

from dpxfin import data

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_records():
    return data.synthesize_dataset(2_000, 0.05, rng_seed=7)


@pytest.fixture(scope="session")
def small_split(small_records):
    return data.prepare_federated_data(small_records, rng_seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ----------------------------------------------------------------------------- acceptance report

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test decides")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    if report.skipped:
        outcome = "SKIP"
    elif report.failed:
        outcome = "FAIL"
    elif report.when == "call":
        outcome = "PASS"
    else:
        return
    if _criteria.get(number, (title, None))[1] != "FAIL":
        _criteria[number] = (title, outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    # attach the criterion marker to every phase report so the logreport hook can read it
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcome = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2} {outcome:<4} {title}")
