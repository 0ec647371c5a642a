import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnetsat.edge import EGFE
from mnetsat.model import (
    REFERENCE_DECODER_DIMS,
    REFERENCE_ENCODER_DIMS,
    Ablation,
    ModelConfig,
    build,
    decoder_rows,
    encoder_rows,
    trace_shapes,
)
from mnetsat.tensor import ShapeError, Tape, Tensor, backward
from mnetsat.training import total_loss

DESK = dict(input_size=64, base_filters=8, stages=4)


@pytest.fixture(scope="module")
def desk_model():
    return build(ModelConfig(**DESK), seed=0)


class TestTrace:
    def test_reference_encoder_rows(self):
        trace = trace_shapes(ModelConfig())
        assert [tuple(r) for r in encoder_rows(trace, 5)] == list(REFERENCE_ENCODER_DIMS)

    def test_reference_decoder_rows(self):
        rows = decoder_rows(trace_shapes(ModelConfig()), 5)
        assert [tuple(r) for r in rows[:-1]] == list(REFERENCE_DECODER_DIMS)

    def test_decoder_stage5_concat(self):
        trace = trace_shapes(ModelConfig())
        assert trace["dec5.up"] == (32, 32, 1024)
        assert trace["dec5.concat"] == (32, 32, 2048)
        assert trace["dec5.egfe"] == (32, 32, 512)

    def test_ceaspp_trace(self):
        trace = trace_shapes(ModelConfig())
        assert trace["bridge.ceaspp.compress"] == (16, 16, 256)
        assert [trace[f"bridge.ceaspp.branch_d{d}"] for d in (1, 4, 8, 12)] == [(16, 16, 256)] * 4
        assert trace["bridge.ceaspp.concat"] == (16, 16, 1280)
        assert trace["bridge.ceaspp"] == (16, 16, 1024)

    def test_head_is_single_channel(self):
        assert trace_shapes(ModelConfig()).entries[-1] == ("head", (512, 512, 1))

    def test_desk_trace_is_scaled_default(self):
        # same depth at 1/8 extent and 1/8 width
        full = trace_shapes(ModelConfig(input_size=512, base_filters=64, stages=5))
        small = trace_shapes(ModelConfig(input_size=64, base_filters=8, stages=5))
        assert full.names() == small.names()
        # input and head channel counts are fixed, everything between scales
        for (_, a), (_, b) in zip(full.entries[1:-1], small.entries[1:-1]):
            assert b == (a[0] // 8, a[1] // 8, a[2] // 8)

    def test_desk_bottleneck(self):
        assert trace_shapes(ModelConfig(**DESK))["enc4.down"] == (4, 4, 64)

    def test_indivisible_input_names_layer(self):
        with pytest.raises(ShapeError, match="input"):
            trace_shapes(ModelConfig(input_size=100, stages=5))

    def test_bad_heads_names_bridge(self):
        from mnetsat.hmatt import HMAttConfig

        with pytest.raises(ShapeError, match="bridge"):
            trace_shapes(ModelConfig(input_size=64, base_filters=6, stages=2, hmatt=HMAttConfig(heads=8)))

    def test_csv(self):
        text = trace_shapes(ModelConfig(**DESK)).to_csv().splitlines()
        assert text[0] == "layer,H,W,C" and text[1] == "input,64,64,3"

    @pytest.mark.parametrize("flag", Ablation.names())
    def test_single_flag_keeps_output_shape(self, flag):
        trace = trace_shapes(ModelConfig(**DESK, ablation=Ablation(**{flag: False})))
        assert trace.entries[-1][1] == (64, 64, 1)


@settings(max_examples=12, deadline=None)
@given(st.integers(1, 3), st.sampled_from([8, 16]), st.integers(1, 2), st.integers(0, 1000))
def test_forward_shape_matches_input(stages, base, mult, seed):
    size = mult * 2 ** stages * 2
    cfg = ModelConfig(input_size=size, base_filters=base, stages=stages)
    model = build(cfg, seed=seed).eval()
    x = np.random.default_rng(seed).random((1, size, size, 3)).astype(np.float32)
    out = model(Tensor(x))
    assert out.shape == (1, size, size, 1)
    assert trace_shapes(cfg).entries[-1][1] == (size, size, 1)


class TestModel:
    def test_ten_egfe_units_by_default(self):
        from mnetsat.model import MNetSAt

        # count units without allocating the 512 model's activations
        model = MNetSAt(ModelConfig(input_size=32, base_filters=8, stages=5), np.random.default_rng(0))
        assert sum(isinstance(m, EGFE) for m in model.modules()) == 10

    def test_output_strictly_inside_unit_interval(self, desk_model, rng):
        out = desk_model.eval()(Tensor(rng.random((2, 64, 64, 3)).astype(np.float32))).data
        assert out.shape == (2, 64, 64, 1)
        assert np.all(out > 0) and np.all(out < 1)

    def test_zero_head_gives_half(self, rng):
        model = build(ModelConfig(**DESK), seed=1).eval()
        model.head.weight.data[...] = 0
        out = model(Tensor(rng.random((1, 64, 64, 3)).astype(np.float32))).data
        np.testing.assert_array_equal(out, 0.5)

    def test_batch_independence(self, desk_model, rng):
        img = rng.random((64, 64, 3)).astype(np.float32)
        out = desk_model.eval()(Tensor(np.stack([img, img]))).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_rejects_wrong_input(self, desk_model):
        with pytest.raises(ShapeError):
            desk_model(Tensor(np.zeros((1, 32, 32, 3), dtype=np.float32)))

    def test_all_flags_off_builds_and_runs(self, rng):
        model = build(ModelConfig(**DESK, ablation=Ablation.all_off()), seed=0).eval()
        assert model.bridge.msfa is None and model.bridge.seat is None and model.bridge.ceaspp is None
        assert model(Tensor(rng.random((1, 64, 64, 3)).astype(np.float32))).shape == (1, 64, 64, 1)

    def test_same_seed_same_weights(self):
        a, b = build(ModelConfig(**DESK), seed=3), build(ModelConfig(**DESK), seed=3)
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)


def _gradient_coverage(seed):
    model = build(ModelConfig(**DESK), seed=seed)
    r = np.random.default_rng(seed)
    x = r.random((4, 64, 64, 3)).astype(np.float32)
    y = (r.random((4, 64, 64, 1)) > 0.7).astype(np.float32)
    with Tape() as tape:
        loss = total_loss(model(Tensor(x)), Tensor(y))
        backward(loss, tape)
    params = model.parameters()
    connected = sum(p.grad is not None for p in params) / len(params)
    nonzero = sum(p.grad is not None and bool(np.any(p.grad)) for p in params) / len(params)
    return connected, nonzero


def test_no_dead_graph():
    # every parameter tensor is connected to the loss; averaged over random
    # inits at least 99% of tensors receive a nonzero gradient
    cover = [_gradient_coverage(seed) for seed in range(6)]
    assert all(c == 1.0 for c, _ in cover)
    assert np.mean([n for _, n in cover]) >= 0.99
