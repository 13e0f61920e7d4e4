import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sethash.dataset import Dataset, ImageSet, synth_dataset

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "call" and report.outcome != "passed")
    if report.when == "call" or failed:
        previous = _CRITERIA.get(number, (title, "PASS"))[1]
        status = "FAIL" if failed or previous == "FAIL" else "PASS"
        _CRITERIA[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"{status}  criterion {number}: {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_dataset():
    return synth_dataset(3, 4, 5, 6, 10.0, 1.0, seed=3)


def make_set(members, set_id=0, label=0):
    return ImageSet(set_id=set_id, label=label, members=np.asarray(members, dtype=np.float64))


def make_ds(sets, num_classes=None):
    if num_classes is None:
        num_classes = max(s.label for s in sets) + 1
    return Dataset(dim=sets[0].dim, sets=tuple(sets), num_classes=num_classes)
