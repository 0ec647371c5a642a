"""Acceptance suite. Each test reports one PASS/FAIL line through the
``criterion`` fixture; the lines are repeated in the pytest terminal summary.
"""

import csv
import math
import time

import numpy as np
import pytest

from mnetsat.checkpoint import load_checkpoint
from mnetsat.cli import main
from mnetsat.data import load_dataset
from mnetsat.edge import sobel_magnitude
from mnetsat.gradcheck import SUITE, run_suite
from mnetsat.hmatt import HMAttConfig
from mnetsat.metrics import confusion, evaluate, metrics
from mnetsat.model import (
    REFERENCE_ENCODER_DIMS,
    Ablation,
    ModelConfig,
    build,
    decoder_rows,
    encoder_rows,
    trace_shapes,
)
from mnetsat.nn import ConvSpec, conv2d, pool
from mnetsat.tensor import Tensor, precision
from mnetsat.training import LossConfig, TrainConfig, bce_loss, dice_loss, total_loss, train
from oracles import loop_bce, naive_conv2d, naive_depthwise, pixel_counts, pool_scan, sobel_direct

DESK = dict(input_size=64, base_filters=8, stages=4)
CASES = 200


# -- 1: gradient suite ------------------------------------------------------------


def test_criterion_1_gradient_suite(criterion):
    required = {"conv2d_s1_d1_same", "conv2d_s2_d2_valid", "depthwise_s1_d2_same", "pointwise_conv",
                "se_block", "layer_norm", "group_norm", "mhseat", "msfa", "ceaspp",
                "dice_loss", "bce_loss", "total_loss"}
    missing = required - set(SUITE)
    start = time.perf_counter()
    # every entry of every input, no subsampling
    results = run_suite(bits=64, seed=0, max_entries=None)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    failed = [r.name for r in results if not r.passed(1e-4)]
    ok = not missing and not failed and elapsed < 300
    criterion(1, ok, f"{len(results)} cases, {sum(r.checked for r in results)} entries, worst "
                     f"{worst.max_rel_error:.2e} ({worst.name}), failed {failed or 'none'}, "
                     f"missing {sorted(missing) or 'none'}, {elapsed:.1f}s")


# -- 2: oracle equivalence --------------------------------------------------------


def _conv_cases(rng):
    dev = 0.0
    for _ in range(CASES):
        n, c, f = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
        h, w = rng.integers(3, 10, size=2)
        k = int(rng.choice([1, 3]))
        stride, dilation = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        padding = "valid" if rng.random() < 0.3 and (k - 1) * dilation < min(h, w) else "same"
        x = rng.normal(size=(n, h, w, c))
        if rng.random() < 0.25:
            wt = rng.normal(size=(k, k, c))
            spec = ConvSpec(kernel=k, stride=stride, dilation=dilation, padding=padding, filters=c, depthwise=True)
            got = conv2d(Tensor(x), spec, (Tensor(wt), None)).data
            want = naive_depthwise(x, wt, None, stride, dilation, padding)
        else:
            wt, b = rng.normal(size=(k, k, c, f)), rng.normal(size=f)
            spec = ConvSpec(kernel=k, stride=stride, dilation=dilation, padding=padding, filters=f)
            got = conv2d(Tensor(x), spec, (Tensor(wt), Tensor(b))).data
            want = naive_conv2d(x, wt, b, stride, dilation, padding)
        dev = max(dev, float(np.max(np.abs(got - want))))
    return dev


def _sobel_cases(rng):
    dev = 0.0
    for _ in range(CASES):
        x = rng.normal(size=(int(rng.integers(1, 3)), *rng.integers(3, 7, size=2), int(rng.integers(1, 4))))
        dev = max(dev, float(np.max(np.abs(sobel_magnitude(Tensor(x)).data - sobel_direct(x)))))
    return dev


def _metric_cases(rng):
    dev = 0.0
    for _ in range(CASES):
        shape = tuple(rng.integers(1, 12, size=2))
        p = (rng.random(shape) < rng.random()).astype(np.uint8)
        g = (rng.random(shape) < rng.random()).astype(np.uint8)
        tp, fp, fn, tn = pixel_counts(p, g)
        cc = confusion(p, g)
        dev = max(dev, float(max(abs(a - b) for a, b in zip((cc.tp, cc.fp, cc.fn, cc.tn), (tp, fp, fn, tn)))))
        row = metrics(cc)
        if tp + fp + fn:
            want = (2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn),
                    tp / (tp + fp) if tp + fp else 0.0, tp / (tp + fn) if tp + fn else 0.0)
            dev = max(dev, max(abs(a - b) for a, b in zip(row.as_tuple(), want)))
    return dev


def _pool_cases(rng):
    dev = 0.0
    for _ in range(CASES):
        kind = str(rng.choice(["max", "avg"]))
        window, stride = int(rng.integers(2, 4)), int(rng.integers(1, 3))
        padding = str(rng.choice(["same", "valid"]))
        x = rng.normal(size=(int(rng.integers(1, 3)), *rng.integers(window, 9, size=2), int(rng.integers(1, 4))))
        got = pool(Tensor(x), kind, window, stride, padding).data
        dev = max(dev, float(np.max(np.abs(got - pool_scan(x, kind, window, stride, padding)))))
    return dev


def test_criterion_2_oracle_equivalence(criterion):
    start = time.perf_counter()
    with precision(64):
        devs = {name: fn(np.random.default_rng(k)) for k, (name, fn) in enumerate(
            [("conv", _conv_cases), ("sobel", _sobel_cases), ("metrics", _metric_cases), ("pool", _pool_cases)])}
    elapsed = time.perf_counter() - start
    ok = all(d <= 1e-10 for d in devs.values()) and elapsed < 120
    criterion(2, ok, ", ".join(f"{k} {v:.1e}" for k, v in devs.items()) + f" over {CASES} cases each, {elapsed:.1f}s")


# -- 3: shape contract ------------------------------------------------------------


def test_criterion_3_shape_contract(criterion):
    start = time.perf_counter()
    cfg = ModelConfig(input_size=512, base_filters=64, stages=5)
    trace = trace_shapes(cfg)
    elapsed = time.perf_counter() - start
    rows = [tuple(r) for r in encoder_rows(trace, 5)]
    # decoder stage i upsamples to the stage-i skip extent and ends at its width
    consistent = True
    for i in range(1, 6):
        skip = trace[f"enc{i}.egfe"]
        up, cat, out = trace[f"dec{i}.up"], trace[f"dec{i}.concat"], trace[f"dec{i}.egfe"]
        consistent &= up[:2] == skip[:2] == out[:2] and cat[2] == up[2] + skip[2]
    bridge = [trace[f"bridge.{b}"] for b in ("msfa", "seat", "ceaspp")]
    consistent &= all(b == trace["enc5.down"] for b in bridge)
    consistent &= trace.entries[-1] == ("head", (512, 512, 1)) and len(decoder_rows(trace, 5)) >= 5
    ok = rows == list(REFERENCE_ENCODER_DIMS) and consistent and elapsed < 1.0
    criterion(3, ok, f"encoder rows {'match' if rows == list(REFERENCE_ENCODER_DIMS) else 'DIFFER'}, "
                     f"traces {'consistent' if consistent else 'INCONSISTENT'}, head {trace.entries[-1][1]}, "
                     f"{elapsed * 1000:.1f}ms")


def test_criterion_3_cli_exit_code(capsys):
    assert main(["shapecheck", "--input", "512", "--base-filters", "64", "--stages", "5"]) == 0
    assert "16 x 16 x 1024" in capsys.readouterr().out


# -- 4: synthetic end-to-end ------------------------------------------------------


@pytest.fixture(scope="module")
def synth_data(synth_root):
    return load_dataset(synth_root, size=(64, 64))


@pytest.mark.slow
def test_criterion_4_synthetic_end_to_end(criterion, synth_data):
    assert [len(synth_data[s]) for s in ("train", "val", "test")] == [200, 25, 25]
    start = time.perf_counter()
    model = build(ModelConfig(**DESK), seed=0)
    cfg = TrainConfig(lr=1e-4, batch_size=8, epochs=30, seed=0)
    result = train(model, synth_data, cfg)
    dsc = evaluate(model, synth_data["test"], threshold=0.5).dsc
    losses = result.losses
    stalls = sum(losses[k] >= losses[k - 1] for k in range(1, 5))
    elapsed = time.perf_counter() - start
    ok = dsc >= 0.90 and stalls <= 1
    criterion(4, ok, f"test DSC {dsc:.4f} (need >= 0.90), first-5 losses "
                     f"{[round(v, 4) for v in losses[:5]]} with {stalls} non-decreasing, "
                     f"{len(losses)} epochs, {elapsed / 60:.1f} min")


# -- 5: ablation structure --------------------------------------------------------


def _se_params(c, reduction):
    h = max(1, c // reduction)
    return c * h + h + h * c + c


def _ceaspp_params(c, inner, branches, compress):
    gn_conv = lambda cin, cout, taps: taps * cin * cout + cout + 2 * cout  # noqa: E731
    total = gn_conv(c, inner, 1) if compress else 0
    total += branches * (9 * inner + inner + 2 * inner)  # depthwise 3x3
    total += gn_conv(inner, inner, 1)
    total += gn_conv(inner * (branches + 1), c, 1)
    return total


def _count(model, prefix=""):
    return sum(p.data.size for n, p in model.named_parameters() if n.startswith(prefix))


def test_criterion_5_ablation_structure(criterion, synth_data):
    h = HMAttConfig()
    c = DESK["base_filters"] * 2 ** (DESK["stages"] - 1)
    n_msfa, n_aspp = len(h.msfa_dilations), len(h.ceaspp_dilations)
    inner = c // h.compression_factor
    variants = {
        "egfe without sobel": ({"egfe_sobel": False}, 0, None),
        "msfa without se": ({"msfa_se": False}, -n_msfa * _se_params(c, h.se_reduction), "bridge.msfa.se."),
        "seat without ln": ({"seat_ln": False}, -3 * 2 * c, "bridge.seat.attention."),
        "ceaspp without cc": ({"ceaspp_cc": False},
                              _ceaspp_params(c, c, n_aspp, False) - _ceaspp_params(c, inner, n_aspp, True),
                              "bridge.ceaspp."),
    }
    full = build(ModelConfig(**DESK), seed=0)
    full_shapes = {n: p.shape for n, p in full.named_parameters()}
    small = {"train": synth_data["train"][:40], "val": synth_data["val"]}
    details, ok = [], True
    for label, (flags, expected, scope) in variants.items():
        model = build(ModelConfig(**DESK, ablation=Ablation(**flags)), seed=0)
        delta = _count(model) - _count(full)
        shapes = {n: p.shape for n, p in model.named_parameters()}
        changed = {n for n in full_shapes.keys() | shapes.keys() if full_shapes.get(n) != shapes.get(n)}
        confined = all(scope is not None and n.startswith(scope) for n in changed)
        res = train(model, small, TrainConfig(epochs=3, augment_per_image=0, seed=0))
        trained = len(res.losses) == 3 and all(math.isfinite(v) for v in res.losses)
        good = delta == expected and (confined or not changed) and trained
        ok &= good
        details.append(f"{label} {delta:+d} (want {expected:+d})")
    criterion(5, ok, "; ".join(details) + f"; full model {_count(full)} params")


# -- 6: loss values ---------------------------------------------------------------


def test_criterion_6_loss_values(criterion):
    with precision(64):
        p = np.zeros((1, 4, 4, 1))
        g = np.zeros((1, 4, 4, 1))
        p[0, 0, :, 0] = 1
        g[0, 3, :, 0] = 1
        dice = dice_loss(p, g, eps=1.0).item()
        bce = bce_loss(np.array([0.5]), np.array([1.0])).item()
        rng = np.random.default_rng(0)
        q = rng.random((2, 6, 6, 1))
        t = (rng.random((2, 6, 6, 1)) > 0.5).astype(float)
        total = total_loss(q, t, LossConfig(gamma=0.5, delta=0.5)).item()
        weighted = 0.5 * dice_loss(q, t).item() + 0.5 * loop_bce(q, t)
    errs = (abs(dice - (1 - 1 / 9)), abs(bce - math.log(2)), abs(total - weighted))
    ok = all(e <= 1e-6 for e in errs)
    criterion(6, ok, f"dice {dice:.8f} vs 1-1/9, bce {bce:.8f} vs ln2, total {total:.8f} vs weighted sum "
                     f"{weighted:.8f}; errors {', '.join(f'{e:.1e}' for e in errs)}")


# -- 7: reproducibility -----------------------------------------------------------


def test_criterion_7_reproducibility(criterion, synth_root, tmp_path):
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code = main(["train", "--data", str(synth_root), "--out", str(out), "--seed", "7", "--epochs", "2",
                     "--augment", "1", "--input", "64", "--base-filters", "8", "--stages", "4"])
        assert code == 0
        runs.append(out)
    logs = [(r / "train_log.csv").read_bytes() for r in runs]
    identical = logs[0] == logs[1]
    ckpt_same = (runs[0] / "best.ckpt").read_bytes() == (runs[1] / "best.ckpt").read_bytes()
    with open(runs[0] / "train_log.csv") as fh:
        best = max(float(row["val_dsc"]) for row in csv.DictReader(fh))
    model = build(ModelConfig(**DESK), seed=123)
    model.load_state_dict(load_checkpoint(runs[0] / "best.ckpt"))
    val = load_dataset(synth_root, size=(64, 64), splits=["val"], seed=7)["val"]
    reloaded = evaluate(model, val).dsc
    ok = identical and ckpt_same and abs(reloaded - best) <= 1e-6
    criterion(7, ok, f"logs {'identical' if identical else 'DIFFER'}, checkpoints "
                     f"{'identical' if ckpt_same else 'DIFFER'}, val DSC logged {best:.8f} "
                     f"reloaded {reloaded:.8f}")
