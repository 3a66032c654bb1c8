"""Verdict lines collected by the acceptance tests and echoed by conftest."""

LINES = []


def verdict(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({detail})"
    print(line)
    LINES.append(line)
    assert ok, line
