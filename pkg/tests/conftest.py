import numpy as np
import pytest

from mnetsat.tensor import precision, set_check_finite


@pytest.fixture(autouse=True)
def _finite_guard():
    """Surface NaN/Inf from every op during tests."""
    set_check_finite(True)
    yield
    set_check_finite(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(64):
        yield np.float64


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """A 250-image 64x64 synthetic corpus shared by the slower tests."""
    from mnetsat.synth import synth_generate

    return synth_generate(str(tmp_path_factory.mktemp("synth")), 250, size=64, seed=0)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; a falsy result fails the test."""

    def record(number: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])
        assert ok, _ACCEPTANCE[number]

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
