import functools

import pytest

from archoscope import fixtures
from archoscope.emulator import CostModel, emulate_inference
from archoscope.render import RenderParams, render_trace

ACCEPTANCE_RESULTS = {}


@functools.lru_cache(maxsize=None)
def rendered(name: str, **params):
    """Default-params trace of a reference model, shared across tests."""
    arch = fixtures.REFERENCE_MODELS[name]()
    root = emulate_inference(arch, CostModel())
    return arch, root, render_trace(root, RenderParams(**params))


@pytest.fixture(scope="session")
def reference_trace():
    return rendered


@pytest.fixture(scope="session")
def acceptance():
    """Records ``criterion -> (passed, detail)`` for the terminal summary."""
    return ACCEPTANCE_RESULTS


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
