import os

import pytest

from signflip.bench.victim import pinned_desk_victim


@pytest.fixture(scope="session")
def victim(tmp_path_factory):
    """The default desk CNN, trained once per session (or read from $SIGNFLIP_VICTIM_CACHE)."""
    cache = os.environ.get("SIGNFLIP_VICTIM_CACHE") or tmp_path_factory.mktemp("victim")
    return pinned_desk_victim(cache)


@pytest.fixture(scope="session")
def victim_dir(victim, tmp_path_factory):
    from signflip.bench.victim import save_victim
    d = tmp_path_factory.mktemp("model")
    save_victim(victim, d)
    return d


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture()
def record():
    """Store one PASS/FAIL line for an acceptance criterion; printed in the terminal summary."""
    def _record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[n])
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
