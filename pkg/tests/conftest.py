import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from kevtrace.mirror import default_manifests  # noqa: E402
from kevtrace.schema import default_schema  # noqa: E402

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture(scope="session")
def table():
    return default_schema()


@pytest.fixture(scope="session")
def manifests():
    return default_manifests()


@pytest.fixture
def fixture_path():
    return lambda *parts: os.path.join(FIXTURES, *parts)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
