import pytest

_verdicts = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("acceptance")
    if mark is None or not mark.args or call.when != "call":
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if call.excinfo is not None and not detail:
        detail = f"{call.excinfo.typename}: {str(call.excinfo.value).splitlines()[0] if str(call.excinfo.value) else ''}"
    _verdicts[n] = (title, call.excinfo is None, detail)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        title, ok, detail = _verdicts[n]
        terminalreporter.write_line(f"[{n:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")


@pytest.fixture
def detail(request):
    """Call with a one-line summary of what the criterion measured."""

    def note(text: str) -> None:
        request.node.user_properties.append(("detail", text))

    return note
