"""Time the compiled and numpy sliding-window kernels on desk-scale shapes.

    python benchmarks/bench_kernels.py [--repeat 20]

Also times one training step of the 64x64 desk model under each backend.
"""

import argparse
import timeit

import numpy as np

from mnetsat import kernels
from mnetsat.model import ModelConfig, build
from mnetsat.tensor import Tape, Tensor, backward
from mnetsat.training import total_loss

# (name, padded input N x Hp x Wp x C, kernel, stride, dilation)
CASES = [
    ("enc1 3x3", (8, 66, 66, 8), 3, 1, 1),
    ("enc3 3x3", (8, 18, 18, 32), 3, 1, 1),
    ("msfa d6", (8, 16, 16, 64), 3, 1, 6),
    ("stride 2", (8, 65, 65, 8), 3, 2, 1),
]


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def bench_kernels(backends, repeat):
    rng = np.random.default_rng(0)
    print(f"{'case':<12}{'op':<10}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, shape, k, stride, dil in CASES:
        xp = rng.normal(size=shape).astype(np.float32)
        ho = (shape[1] - (k - 1) * dil - 1) // stride + 1
        wo = (shape[2] - (k - 1) * dil - 1) // stride + 1
        cols = kernels.get_backend("python").im2col(xp, k, k, stride, dil, ho, wo)
        pooled = 2 * (shape[1] // 2)
        px = np.ascontiguousarray(xp[:, :pooled, :pooled])
        rows = {"im2col": [], "col2im": [], "maxpool": []}
        for b in backends:
            impl = kernels.get_backend(b)
            rows["im2col"].append(_time(lambda: impl.im2col(xp, k, k, stride, dil, ho, wo), repeat))
            rows["col2im"].append(_time(lambda: impl.col2im(cols, shape[1], shape[2], stride, dil), repeat))
            rows["maxpool"].append(_time(lambda: impl.maxpool_forward(px, 2, 2, pooled // 2, pooled // 2), repeat))
        for op, times in rows.items():
            speed = f"{times[0] / times[-1]:>9.2f}x" if len(times) > 1 else ""
            print(f"{name:<12}{op:<10}" + "".join(f"{t:>10.3f}ms" for t in times) + speed)


def bench_step(backends, repeat):
    model = build(ModelConfig(input_size=64, base_filters=8, stages=4), seed=0)
    rng = np.random.default_rng(1)
    x = Tensor(rng.random((8, 64, 64, 3)).astype(np.float32))
    y = Tensor((rng.random((8, 64, 64, 1)) > 0.7).astype(np.float32))

    def step():
        with Tape() as tape:
            loss = total_loss(model(x), y)
            backward(loss, tape)

    for b in backends:
        kernels.use_backend(b)
        print(f"train step (batch 8, 64x64) [{b}]: {_time(step, max(2, repeat // 5)):.1f}ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    backends = kernels.available_backends()
    if len(backends) == 1:
        print("compiled kernels not built; timing the numpy fallback only")
    bench_kernels(backends, args.repeat)
    bench_step(backends, args.repeat)


if __name__ == "__main__":
    main()
