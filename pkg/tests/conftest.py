import zlib

import pytest

from flowcorr.simulator import preset, simulate
from flowcorr.trace_model import ConnectionId, Direction, EndpointTuple, Flow, PacketRecord

SERVER_A = EndpointTuple("10.0.0.5", 443)
SERVER_B = EndpointTuple("10.0.0.9", 51000)


def make_conn(name: str) -> ConnectionId:
    return ConnectionId(name, SERVER_A, EndpointTuple("10.0.1.1", 40000 + zlib.crc32(name.encode()) % 1000))


def make_flow(name: str, packets) -> Flow:
    """Flow from ``(timestamp, size)`` or ``(timestamp, size, 'up'|'down')`` tuples."""
    conn = make_conn(name)
    records = []
    for p in packets:
        t, size, *rest = p
        direction = Direction(rest[0]) if rest else Direction.DOWN
        records.append(PacketRecord(t, conn, direction, size))
    return Flow.from_packets(conn, records)


@pytest.fixture(scope="session")
def tiny_run():
    return simulate(preset("tiny"))


@pytest.fixture(scope="session")
def small_run():
    return simulate(preset("small"))


# -- acceptance summary: one line per criterion at the end of the run ----------

_ACCEPTANCE: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        previous = _ACCEPTANCE.get(label, "PASS")
        _ACCEPTANCE[label] = "PASS" if previous == "PASS" and report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=lambda s: int(s.split(".")[0])):
        terminalreporter.write_line(f"{_ACCEPTANCE[label]}  criterion {label}")
