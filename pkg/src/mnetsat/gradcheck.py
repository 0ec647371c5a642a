"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor

# entries smaller than this are judged by absolute error (|a - n| < 1e-9 at tol 1e-4);
# finite differences of exactly-zero gradients leave ~1e-10 of roundoff
REL_FLOOR = 1e-5


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    worst_input: str = ""

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    *,
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
    name: str = "",
    labels: Optional[Sequence[str]] = None,
    refine_above: Optional[float] = 1e-4,
) -> GradCheckResult:
    """Compare tape gradients of ``fn`` with central differences.

    ``fn`` may return any tensor; it is contracted with a fixed random weight
    so that every output element contributes to the scalar objective.
    Only inputs with ``requires_grad`` are checked. With ``max_entries`` a
    random subset of coordinates per input is probed.

    Entries whose error exceeds ``refine_above`` are probed again with steps
    ``step/10`` and ``step/100`` and keep the best agreement. A ReLU or max
    kink lying within ``step`` of the probe point corrupts only the coarse
    difference; a wrong analytic gradient disagrees at every step.
    """
    rng = np.random.default_rng(seed)
    labels = list(labels) if labels is not None else [f"input{i}" for i in range(len(inputs))]

    with Tape() as tape:
        out = fn(*inputs)
        weight = Tensor(rng.uniform(-1.0, 1.0, size=out.shape), dtype=out.dtype)
        loss = (out * weight).sum()
    for t in inputs:
        t.grad = None
    grads = tape.backward(loss)

    def evaluate() -> np.ndarray:
        return fn(*inputs).data

    worst, worst_label, checked = 0.0, "", 0
    for label, t in zip(labels, inputs):
        if not t.requires_grad:
            continue
        analytic = grads.get(t, np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))

        def probe(i, h):
            orig = flat[i]
            flat[i] = orig + h
            out_plus = evaluate()
            flat[i] = orig - h
            out_minus = evaluate()
            flat[i] = orig
            # difference before contracting: unaffected outputs cancel exactly
            return float((weight.data * (out_plus - out_minus)).sum()) / (2.0 * h)

        numeric = np.array([probe(i, step) for i in idx])
        err = relative_error(analytic[idx], numeric)
        if refine_above is not None:
            for k in np.flatnonzero(err > refine_above):
                for h in (step / 10, step / 100):
                    n = probe(idx[k], h)
                    err[k] = min(err[k], float(relative_error(analytic[idx[k]:idx[k] + 1], np.array([n]))[0]))
        checked += len(idx)
        if err.size and err.max() > worst:
            worst, worst_label = float(err.max()), label
    return GradCheckResult(name=name, max_rel_error=worst, checked=checked, worst_input=worst_label)


# -- named suite ------------------------------------------------------------------
#
# Each builder takes an rng and returns (fn, inputs, labels). Inputs are at most
# 2 x 8 x 8 x 8 and are created in the current default precision.


def _leaf(rng, shape, lo=-1.0, hi=1.0, name=None):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, name=name)


def _module_case(module, x):
    params = list(module.named_parameters())
    for _, p in params:
        p.requires_grad = True
    module.eval()
    inputs = [x] + [p for _, p in params]
    labels = ["x"] + [n for n, _ in params]
    return (lambda x, *ps: module(x)), inputs, labels


def _conv_case(stride, dilation, padding, kernel=3, depthwise=False):
    def build(rng):
        from .nn import ConvSpec, conv2d

        c, f = 4, 5
        spec = ConvSpec(kernel=kernel, stride=stride, dilation=dilation, padding=padding,
                        filters=c if depthwise else f, depthwise=depthwise)
        x = _leaf(rng, (2, 8, 8, c))
        w = _leaf(rng, (kernel, kernel, c) if depthwise else (kernel, kernel, c, f))
        b = _leaf(rng, (c if depthwise else f,))
        return (lambda x, w, b: conv2d(x, spec, (w, b))), [x, w, b], ["x", "weight", "bias"]

    return build


def _pool_case(kind, window, stride, padding):
    def build(rng):
        from .nn import pool

        x = _leaf(rng, (2, 8, 8, 3))
        return (lambda x: pool(x, kind, window, stride, padding)), [x], ["x"]

    return build


def _upsample(rng):
    from .nn import upsample

    return (lambda x: upsample(x, 2)), [_leaf(rng, (2, 4, 4, 3))], ["x"]


def _norm_case(kind):
    def build(rng):
        from .nn import normalize

        x = _leaf(rng, (2, 8, 8, 8))
        g = _leaf(rng, (8,), 0.5, 1.5)
        b = _leaf(rng, (8,))
        return (lambda x, g, b: normalize(x, kind, (g, b))), [x, g, b], ["x", "gamma", "beta"]

    return build


def _se(rng):
    from .nn import SEBlock

    return _module_case(SEBlock(8, reduction=2, rng=rng), _leaf(rng, (2, 8, 8, 8)))


def _elementwise(op):
    def build(rng):
        from .tensor import elementwise

        a = _leaf(rng, (2, 4, 4, 3))
        b = _leaf(rng, (1, 1, 1, 3), 0.5, 1.5)
        return (lambda a, b: elementwise(op, a, b)), [a, b], ["a", "b"]

    return build


def _matmul(rng):
    from .tensor import matmul

    return (lambda a, b: matmul(a, b)), [_leaf(rng, (2, 3, 5, 4)), _leaf(rng, (4, 6))], ["a", "b"]


def _activation(kind):
    def build(rng):
        from .nn import activate

        return (lambda x: activate(x, kind, axis=-1)), [_leaf(rng, (2, 4, 4, 5), -3, 3)], ["x"]

    return build


def _reduce_max(rng):
    from .tensor import reduce

    return (lambda x: reduce("max", x, axes=(1, 2))), [_leaf(rng, (2, 4, 4, 3))], ["x"]


def _edge_pad(rng):
    from .tensor import pad

    return (lambda x: pad(x, {1: (1, 2), 2: (2, 1)}, mode="edge")), [_leaf(rng, (2, 4, 4, 3))], ["x"]


def _sobel(rng):
    from .edge import sobel_magnitude

    return (lambda x: sobel_magnitude(x)), [_leaf(rng, (2, 8, 8, 3))], ["x"]


def _egfe(rng):
    from .edge import EGFE

    return _module_case(EGFE(3, 4, rng=rng), _leaf(rng, (2, 8, 8, 3)))


def _hmatt_cfg():
    from .hmatt import HMAttConfig

    return HMAttConfig(heads=2, msfa_dilations=(1, 2, 3, 4), ceaspp_dilations=(1, 2, 3, 4),
                       se_reduction=2, compression_factor=2, msfa_fusion_kernel=3, dropout_rate=0.0)


def _msfa(rng):
    from .hmatt import MSFA

    return _module_case(MSFA(8, _hmatt_cfg(), rng=rng), _leaf(rng, (2, 8, 8, 8)))


def _mhseat(rng):
    from .hmatt import MHSEAt

    return _module_case(MHSEAt(8, _hmatt_cfg(), rng=rng), _leaf(rng, (2, 8, 8, 8)))


def _seat(rng):
    from .hmatt import SEAt

    return _module_case(SEAt(8, _hmatt_cfg(), rng=rng), _leaf(rng, (2, 8, 8, 8)))


def _ceaspp(rng):
    from .hmatt import CEASPP

    return _module_case(CEASPP(8, _hmatt_cfg(), rng=rng), _leaf(rng, (2, 8, 8, 8)))


def _loss_case(kind):
    def build(rng):
        from .training import LossConfig, bce_loss, dice_loss, total_loss

        y_p = _leaf(rng, (1, 4, 4, 1), 0.05, 0.95)
        y_g = Tensor((rng.random((1, 4, 4, 1)) < 0.5).astype(float))
        fn = {
            "dice": lambda p: dice_loss(p, y_g, 1.0),
            "bce": lambda p: bce_loss(p, y_g),
            "total": lambda p: total_loss(p, y_g, LossConfig()),
        }[kind]
        return fn, [y_p], ["y_p"]

    return build


SUITE: dict[str, Callable] = {}
for _s in (1, 2):
    for _d in (1, 2):
        for _p in ("same", "valid"):
            SUITE[f"conv2d_s{_s}_d{_d}_{_p}"] = _conv_case(_s, _d, _p)
            SUITE[f"depthwise_s{_s}_d{_d}_{_p}"] = _conv_case(_s, _d, _p, depthwise=True)
SUITE["pointwise_conv"] = _conv_case(1, 1, "same", kernel=1)
SUITE.update({
    "maxpool_2x2": _pool_case("max", 2, 2, "valid"),
    "maxpool_same_s1": _pool_case("max", 2, 1, "same"),
    "avgpool_2x2": _pool_case("avg", 2, 2, "valid"),
    "avgpool_3x3_same": _pool_case("avg", 3, 1, "same"),
    "upsample": _upsample,
    "layer_norm": _norm_case("layer"),
    "group_norm": _norm_case(("group", 4)),
    "se_block": _se,
    "add_broadcast": _elementwise("add"),
    "sub_broadcast": _elementwise("sub"),
    "mul_broadcast": _elementwise("mul"),
    "matmul": _matmul,
    "sigmoid": _activation("sigmoid"),
    "softmax": _activation("softmax"),
    "reduce_max": _reduce_max,
    "edge_pad": _edge_pad,
    "sobel": _sobel,
    "egfe": _egfe,
    "msfa": _msfa,
    "mhseat": _mhseat,
    "seat": _seat,
    "ceaspp": _ceaspp,
    "dice_loss": _loss_case("dice"),
    "bce_loss": _loss_case("bce"),
    "total_loss": _loss_case("total"),
})


def run_suite(names: Optional[Sequence[str]] = None, *, bits: int = 64, seed: int = 0,
              max_entries: Optional[int] = 48) -> list[GradCheckResult]:
    """Run the named cases (all by default) and return one result per case."""
    from .tensor import precision

    names = list(SUITE) if names is None else list(names)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise KeyError(f"unknown gradcheck cases: {unknown}")
    results = []
    with precision(bits):
        for k, name in enumerate(names):
            rng = np.random.default_rng([seed, k])
            fn, inputs, labels = SUITE[name](rng)
            results.append(gradcheck(fn, inputs, max_entries=max_entries, seed=seed + k, name=name, labels=labels))
    return results
