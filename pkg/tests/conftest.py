from __future__ import annotations

import numpy as np
import pytest

# criterion id -> (passed, one-line detail), filled by the acceptance suite
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record_criterion():
    def record(cid: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE[cid] = (bool(passed), detail)
        print(f"{cid}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)
    return record


def _order(cid: str):
    head = cid.split()[0]
    return (0, int(head[1:])) if head[0] == "C" and head[1:].isdigit() else (1, cid)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=_order):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid}: {'PASS' if ok else 'FAIL'}  {detail}")
