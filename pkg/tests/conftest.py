import pytest

_RESULTS: dict = {}


class Criterion:
    def __init__(self, key: str, title: str):
        self.key, self.title = key, title

    def check(self, ok: bool, detail: str) -> None:
        _RESULTS[self.key] = (bool(ok), self.title, detail)
        print(f"{'PASS' if ok else 'FAIL'} {self.key} {self.title}: {detail}")
        assert ok, detail


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    key, title = marker.args
    return Criterion(key, title)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(key, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS, key=lambda k: int(k[1:])):
        ok, title, detail = _RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {key} {title}: {detail}")
