import random

import pytest

from psifeed import commgroup


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def key_pair(rng):
    return commgroup.keygen(rng), commgroup.keygen(rng)


# -- acceptance verdicts -------------------------------------------------------

import contextlib

_VERDICTS: dict[int, dict] = {}


@pytest.fixture
def criterion():
    """``with criterion(n, title) as note:`` records pass/fail for acceptance criterion n."""

    @contextlib.contextmanager
    def record(n, title):
        entry = _VERDICTS.setdefault(n, {"title": title, "ok": True, "notes": []})
        try:
            yield entry["notes"].append
        except BaseException:
            entry["ok"] = False
            raise

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        v = _VERDICTS[n]
        detail = "; ".join(v["notes"])
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if v['ok'] else 'FAIL'}: {v['title']}"
                                    + (f" ({detail})" if detail else ""))
