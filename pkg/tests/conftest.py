import time

import pytest

from vip import harness

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The default pipeline, run once per session and written to disk."""
    out = tmp_path_factory.mktemp("default")
    config = harness.PipelineConfig(out=str(out))
    t0 = time.perf_counter()
    result = harness.run_pipeline(config)
    result.timings["total"] = time.perf_counter() - t0
    return config, result


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
