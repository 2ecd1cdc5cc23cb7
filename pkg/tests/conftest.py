import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "kit",
    deadline=None,
    max_examples=int(os.environ.get("KIT_HYPOTHESIS_EXAMPLES", "40")),
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("kit")


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance_record(request):
    """Collect one human-readable verdict line per acceptance criterion."""

    def record(line: str):
        request.config._acceptance_lines.append(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
