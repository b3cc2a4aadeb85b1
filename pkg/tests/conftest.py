import sys
from pathlib import Path

import pytest

from pilotkit.resources import AgentLaunch, BatchSimConfig, QueueWait, ResourceConfig

sys.path.insert(0, str(Path(__file__).parent))

PARALLEL = "env PILOTKIT_NPROC={NPROC} PILOTKIT_NODES={NODES} {EXE} {ARGS}"


def make_resource(name="test", nodes=4, cores_per_node=4, gpus_per_node=0, wait=None,
                  launch=AgentLaunch.IN_PROCESS, max_jobs=4, seed=0):
    batch = None
    if wait is not None:
        batch = BatchSimConfig(QueueWait.fixed(wait), max_jobs, seed)
    return ResourceConfig(name, nodes, cores_per_node, gpus_per_node, launch, batch,
                          {"DIRECT": "{EXE} {ARGS}", "PARALLEL": PARALLEL})


@pytest.fixture
def resource():
    return make_resource


@pytest.fixture
def session_dir(tmp_path):
    return tmp_path / "session"


# -- acceptance reporting ------------------------------------------------------------

CRITERIA = {
    "test_01_flagship_sim_3072": "1 flagship on sim-3072",
    "test_02_late_binding_with_queue_wait": "2 late binding",
    "test_03_scheduler_matches_oracle": "3 scheduler oracle",
    "test_04_stage_ordering": "4 stage ordering",
    "test_05_fault_recovery": "5 fault recovery",
    "test_06_heterogeneous_conservation": "6 heterogeneous conservation",
    "test_07_throughput_local": "7 throughput",
    "test_08_replay_determinism": "8 replay determinism",
}
_measured: dict[str, dict] = {}
_outcomes: dict[str, str] = {}


@pytest.fixture
def acceptance(request):
    """Record measured values for the acceptance summary line."""
    def record(**values):
        _measured.setdefault(request.node.name, {}).update(values)
    return record


def pytest_runtest_logreport(report):
    name = report.nodeid.rpartition("::")[2]
    if name not in CRITERIA:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name, label in CRITERIA.items():
        if name not in _outcomes:
            continue
        values = " ".join(f"{k}={v}" for k, v in _measured.get(name, {}).items())
        terminalreporter.write_line(f"{_outcomes[name]}  {label:<30} {values}")
