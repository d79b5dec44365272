import numpy as np
import pytest

from foosball_state.core import ROD_IDS, GameState, RodState, default_table_geometry


@pytest.fixture(scope="session")
def geometry():
    return default_table_geometry()


def centered_state(frame_id=0, timestamp_us=0, **overrides):
    """Every rod centered at 180 deg; ``overrides`` maps rod name -> RodState."""
    rods = {rid: overrides.get(rid.name, RodState(0.0, 180.0)) for rid in ROD_IDS}
    return GameState(frame_id, timestamp_us, rods)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ------------------------------------------------------------

_CRITERIA: list[tuple[int, str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA.append((marker.args[0], marker.args[1], "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, verdict, detail in sorted(_CRITERIA):
        line = f"criterion {number} [{verdict}] {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
