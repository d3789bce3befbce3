import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from floodtl.numerics import kernels  # noqa: E402


@pytest.fixture(params=["numpy", "numba"])
def backend(request):
    """Run a test once per kernel backend, restoring the default afterwards."""
    before = kernels.backend()
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(before)


def pytest_terminal_summary(terminalreporter):
    import report

    if report.LINES:
        terminalreporter.section("acceptance criteria")
        for line in report.LINES:
            terminalreporter.write_line(line)
