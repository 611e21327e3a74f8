import pytest

VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance outcome; the summary lists them in order."""
    store = request.config.stash[VERDICTS]

    def record(n, ok, detail="", part=False):
        if part and n in store:
            # several tests share one criterion; it passes only if all parts do
            ok, detail = store[n][0] and ok, f"{store[n][1]} {detail}"
        store[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(VERDICTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        ok, detail = store[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
