import pytest
from hypothesis import HealthCheck, settings

from dolma.fabric import SimFabric, TcpFabric
from dolma.fabric.latency import LatencyModel, MiB
from dolma.memnode import MemoryNode

settings.register_profile("dolma", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("dolma")


@pytest.fixture
def model():
    return LatencyModel.infiniband()


@pytest.fixture
def sim(model):
    return SimFabric(16 * MiB, model)


@pytest.fixture
def memnode(tmp_path):
    with MemoryNode(capacity=16 * MiB, snapshot_dir=str(tmp_path)) as node:
        yield node


@pytest.fixture
def tcp(memnode):
    fab = TcpFabric(memnode.address)
    yield fab
    fab.close()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
