import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnetsat.edge import EGFE, MAG_FLOOR, egfe_forward, sobel_magnitude
from mnetsat.tensor import ShapeError, Tensor, precision
from oracles import sobel_direct


def test_constant_image_is_floor(f64):
    out = sobel_magnitude(Tensor(np.full((1, 6, 6, 3), 0.7))).data
    np.testing.assert_allclose(out, np.sqrt(MAG_FLOOR), rtol=1e-6)


def test_ramp_interior_magnitude_eight(f64):
    ramp = np.tile(np.arange(8.0), (8, 1))[None, :, :, None]
    out = sobel_magnitude(Tensor(ramp)).data[0, 1:-1, 1:-1, 0]
    np.testing.assert_allclose(out, 8.0, atol=1e-9)


def test_vertical_step_edge(f64):
    img = np.zeros((1, 9, 10, 1))
    img[..., 5:, :] = 1.0
    mag = sobel_magnitude(Tensor(img)).data[0, 4, :, 0]
    assert mag[4] == pytest.approx(4.0) and mag[5] == pytest.approx(4.0)
    assert mag[0] < 1e-5 and mag[-1] < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 7), st.integers(3, 7), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_matches_direct_correlation(h, w, c, seed):
    x = np.random.default_rng(seed).normal(size=(2, h, w, c))
    with precision(64):
        got = sobel_magnitude(Tensor(x)).data
    np.testing.assert_allclose(got, sobel_direct(x), atol=1e-10)


def test_shift_invariance_and_nonnegative(rng, f64):
    x = rng.normal(size=(1, 6, 7, 2))
    a = sobel_magnitude(Tensor(x)).data
    b = sobel_magnitude(Tensor(x + 3.25)).data
    assert np.all(a >= 0)
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_rejects_small_extent():
    with pytest.raises(ShapeError):
        sobel_magnitude(Tensor(np.zeros((1, 2, 5, 1))))


class TestEGFE:
    def test_zero_convs_leave_edge_map(self, rng, f64):
        x = rng.normal(size=(2, 6, 6, 3))
        params = [Tensor(np.zeros((3, 3, 3, 4))), Tensor(np.zeros(4)), Tensor(np.zeros((3, 3, 4, 4))), Tensor(np.zeros(4))]
        out = egfe_forward(Tensor(x), params).data
        np.testing.assert_allclose(out, np.repeat(sobel_direct(x), 4, axis=3), atol=1e-10)

    def test_sobel_off_is_double_conv(self, rng):
        block = EGFE(3, 4, sobel=False, rng=rng)
        x = Tensor(rng.normal(size=(1, 6, 6, 3)).astype(np.float32))
        from mnetsat.tensor import relu

        expected = relu(block.conv2(relu(block.conv1(x)))).data
        np.testing.assert_array_equal(block(x).data, expected)

    def test_module_matches_functional(self, rng):
        block = EGFE(3, 4, rng=rng)
        x = Tensor(rng.normal(size=(1, 5, 5, 3)).astype(np.float32))
        params = (block.conv1.weight, block.conv1.bias, block.conv2.weight, block.conv2.bias)
        np.testing.assert_array_equal(block(x).data, egfe_forward(x, params).data)

    def test_stage3_shape(self):
        # 128 channels in at stage 3, 256 out with base 64; run at reduced extent
        block = EGFE(128, 256, rng=np.random.default_rng(0))
        assert block(Tensor(np.zeros((1, 8, 8, 128), dtype=np.float32))).shape == (1, 8, 8, 256)

    def test_records_edge_map(self, rng):
        record = []
        EGFE(3, 2, rng=rng)(Tensor(rng.random((1, 4, 4, 3))), record=record, name="enc1.egfe")
        assert record[0][0] == "enc1.egfe.edge" and record[0][1].shape == (1, 4, 4, 1)
