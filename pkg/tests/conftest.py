import pytest
from threadpoolctl import threadpool_limits

_LIMITS = threadpool_limits(1)  # single-threaded BLAS keeps results and timings reproducible


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS, summary_line
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for name in RESULTS:
            terminalreporter.write_line(summary_line(name))
