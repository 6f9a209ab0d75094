import numpy as np
import pytest

from affect_e2e.autodiff import functional as F
from affect_e2e.autodiff.gradcheck import max_relative_error, numerical_gradient
from affect_e2e.autodiff.tensor import Tensor, backward


def fd_errors(fn, params: list[Tensor], rng: np.random.Generator, probes: int | None = None, floor: float = 1e-6, step: float = 1e-6):
    """Relative errors between backprop and central differences for each parameter.

    ``fn()`` builds the output tensor from ``params``.  The random projection
    is drawn once so both routes differentiate the same scalar.
    """
    out = fn()
    r = rng.normal(size=out.shape)

    def scalar():
        return float(np.sum(fn().data * r))

    for p in params:
        p.grad = None
    backward(F.sum(F.mul(fn(), r)))
    errors = []
    for p in params:
        idx = None
        if probes is not None and p.size > probes:
            idx = rng.choice(p.size, size=probes, replace=False)
        numeric = numerical_gradient(scalar, p.data, step=step, indices=idx)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        errors.append(max_relative_error(analytic, numeric, floor=floor))
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, passed, detail)`` then assert."""

    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(passed), detail)
        assert passed, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 11):
        if number not in ACCEPTANCE:
            terminalreporter.write_line(f"criterion {number:2d}: not run or errored before reporting")
            continue
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
