import numpy as np
import pytest

from llmkt import numcore
from llmkt.data import HistoryWindow, Interaction

numcore.set_default_dtype(np.float64)

QTEXT = {
    74: "How would this calculation be written? A:8+(2÷5)=2 B:(8+2)÷5=2",
    42: "What is the output of this Function Machine? A:10p B:7p",
    44: "Tom and Katie are arguing about the result of this Function Machine. Who is correct?",
}
CTEXT = {6: "Basic Arithmetic", 5: "Writing Expressions"}


def make_item(i, qid, cid, ok, sid="u1"):
    return Interaction(sid, i, qid, (cid,), ok, QTEXT.get(qid), (CTEXT[cid],) if cid in CTEXT else None)


@pytest.fixture
def golden_window():
    return HistoryWindow((make_item(0, 74, 6, True), make_item(1, 42, 5, False)), make_item(2, 44, 5, False))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
