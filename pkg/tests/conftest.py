import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pixel_mask(h, w, pixels):
    """Boolean mask with the given (x, y) pixels set."""
    m = np.zeros((h, w), bool)
    for x, y in pixels:
        m[y, x] = True
    return m


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(results):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")
