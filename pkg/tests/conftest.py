import numpy as np
import pytest

from tractfusion.dataset import prepare_features
from tractfusion.phantom import PhantomSpec, generate


@pytest.fixture(scope="session")
def tiny_phantom():
    spec = PhantomSpec(n_per_class=8, frames=32, geometric_overlap=1.0,
                       interleave_pattern="checker", interleave_block=2)
    return generate(spec)


@pytest.fixture(scope="session")
def tiny_feats(tiny_phantom):
    return prepare_features(*tiny_phantom, k=6)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail)`` for the end-of-run acceptance summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
