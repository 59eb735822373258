import pytest

from msek.core import ContextSnapshot

# the worked example snapshot used across modules: a loaded 2-of-3-server
# system at dimmer 0.8 answering in ~0.36 s
BUSY_SNAPSHOT = dict(
    dimmer=0.8,
    active_servers=2,
    max_servers=3,
    utilization=0.89261,
    avg_response_time=0.35951825050096935,
    arrival_rate=42.9667,
    sim_time=3000.0,
)


@pytest.fixture
def busy_snapshot() -> ContextSnapshot:
    return ContextSnapshot(**BUSY_SNAPSHOT)
