import time
from contextlib import contextmanager

ACCEPTANCE = {}  # number -> [title, statuses, seconds]


@contextmanager
def criterion(number, title):
    """Record the outcome and wall time of one (part of an) acceptance criterion."""
    start = time.perf_counter()
    ok = False
    try:
        yield
        ok = True
    finally:
        entry = ACCEPTANCE.setdefault(number, [title, [], 0.0])
        entry[1].append(ok)
        entry[2] += time.perf_counter() - start


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, statuses, seconds = ACCEPTANCE[number]
        status = "PASS" if all(statuses) else "FAIL"
        parts = f", {len(statuses)} parts" if len(statuses) > 1 else ""
        terminalreporter.write_line(
            f"criterion {number}: {status}  {title}  ({seconds:.2f}s{parts})")
