import numpy as np
import pytest

from merge_index.core import FineCodebook, ItemRecord

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    ACCEPTANCE_LINES[number] = f"[{status}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_items(embeddings, tag=0, start_id=0):
    return [ItemRecord(start_id + i, np.asarray(e, dtype=float), tag=tag) for i, e in enumerate(embeddings)]


def unit(d, i):
    v = np.zeros(d)
    v[i] = 1.0
    return v


def codebook_with(codewords, counts=None, d=None):
    codewords = np.asarray(codewords, dtype=float)
    d = d or codewords.shape[1]
    fine = FineCodebook(d)
    counts = np.ones(len(codewords)) if counts is None else counts
    for c, n in zip(codewords, counts):
        fine.add_slot(c * n, n)
    return fine
