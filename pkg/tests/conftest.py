import pytest

from bidc.model import ModelParams

_REPORT = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_REPORT] = []


@pytest.fixture
def default_params():
    return ModelParams()


@pytest.fixture
def small_ring():
    """Short ring with the default atom layout, cheap enough for dense solves."""
    return ModelParams.from_reference(None, 0.1, 0.1, n_sites=20)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line, flush=True)
        request.config.stash[_REPORT].append(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
