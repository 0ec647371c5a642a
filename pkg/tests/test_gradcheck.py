import numpy as np
import pytest

from mnetsat.gradcheck import SUITE, gradcheck, relative_error, run_suite
from mnetsat.tensor import Tensor, precision


def test_detects_missing_gradient(f64, rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    # the square is computed off-tape, so its analytic gradient is lost
    res = gradcheck(lambda t: Tensor(t.data ** 2) + t, [x])
    assert not res.passed(1e-4) and res.worst_input == "input0"


def test_square_is_exact(f64, rng):
    x = Tensor(rng.normal(size=(5,)), requires_grad=True)
    res = gradcheck(lambda t: t * t, [x])
    assert res.passed(1e-8) and res.checked == 5


def test_subsampling_limits_entries(f64, rng):
    x = Tensor(rng.normal(size=(10, 10)), requires_grad=True)
    assert gradcheck(lambda t: t * 3.0, [x], max_entries=7).checked == 7


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-10]))[0] == pytest.approx(1e-5)


def test_inputs_bounded():
    with precision(64):
        for name, builder in SUITE.items():
            _, inputs, _ = builder(np.random.default_rng(0))
            # the first input is the data tensor; the rest are weights
            x = inputs[0]
            assert x.ndim <= 4 and x.size <= 2 * 8 * 8 * 8 and max(x.shape) <= 8, name
            assert all(t.dtype == np.float64 for t in inputs), name


@pytest.mark.parametrize("seed", [1, 2])
def test_suite_other_seeds(seed):
    bad = [r for r in run_suite(seed=seed, max_entries=16) if not r.passed(1e-4)]
    assert not bad, bad


def test_unknown_case():
    with pytest.raises(KeyError):
        run_suite(["nope"])
