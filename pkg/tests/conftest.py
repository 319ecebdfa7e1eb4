import numpy as np
import pytest

from moeforge.tensor import Tensor


def numeric_grad(f, t: Tensor, index, h: float = 1e-5) -> float:
    old = t.data[index]
    t.data[index] = old + h
    plus = f()
    t.data[index] = old - h
    minus = f()
    t.data[index] = old
    return (plus - minus) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
