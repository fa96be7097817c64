import time
from contextlib import contextmanager

import numpy as np
import pytest

from olaflow.edf import AttributeDef, EdfSchema

_CRITERIA: dict[int, str] = {}


def make_schema(spec: str, pk=(), ck=None) -> EdfSchema:
    """``"name:utf8,n:int64:mutable"`` -> schema."""
    attrs = tuple(AttributeDef.parse(s) for s in spec.split(","))
    return EdfSchema(attrs, tuple(pk), ck)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion():
    """Context manager timing one acceptance criterion against its budget.

    The body may store a short summary under ``note["detail"]``; the verdict
    line is printed in the terminal summary.
    """

    @contextmanager
    def scope(number: int, title: str, budget: float):
        note: dict = {}
        start = time.perf_counter()
        try:
            yield note
        except BaseException as exc:
            reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            _CRITERIA[number] = f"FAIL  criterion {number} ({title}): {reason[:160]}"
            raise
        elapsed = time.perf_counter() - start
        within = elapsed < budget
        verdict = "PASS" if within else "FAIL"
        detail = f"; {note['detail']}" if note.get("detail") else ""
        _CRITERIA[number] = f"{verdict}  criterion {number} ({title}): {elapsed:.1f}s of {budget:.0f}s{detail}"
        assert within, f"criterion {number} took {elapsed:.1f}s, budget {budget}s"

    return scope


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
