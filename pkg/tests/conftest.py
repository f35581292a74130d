import numpy as np
import pytest

from conpatch import _backend, context, denoise, patchdb

BACKENDS = [_backend.python_kernels]
if _backend.compiled_kernels is not None:
    BACKENDS.append(_backend.compiled_kernels)


@pytest.fixture(params=BACKENDS, ids=lambda k: k.BACKEND)
def backend(request, monkeypatch):
    """Run a test once per kernel backend."""
    for mod in (context, patchdb, denoise):
        monkeypatch.setattr(mod, "kernels", request.param)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance reporting -------------------------------------------------------
# test_acceptance records one line per criterion in helpers.ACCEPTANCE_LINES;
# the lines are echoed as the tests run and repeated at the end of the session.


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
