import pytest

import acceptance_log
from runs import run


class RunCache:
    """Runs each named experiment at most once per session."""

    def __init__(self, root):
        self.root = root
        self.cache_dir = root / "teacher-cache"
        self._done = {}

    def get(self, name):
        if name not in self._done:
            self._done[name] = run(name, self.root, self.cache_dir)
        return self._done[name]


@pytest.fixture(scope="session")
def acceptance_runs(tmp_path_factory):
    return RunCache(tmp_path_factory.mktemp("acceptance"))


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(acceptance_log.RESULTS):
        terminalreporter.write_line(acceptance_log.format_line(k))
    missing = sorted(set(acceptance_log.TITLES) - set(acceptance_log.RESULTS))
    if missing:
        terminalreporter.write_line(f"not run: {missing}")
