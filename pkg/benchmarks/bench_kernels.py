"""Compare the compiled and numpy kernel backends.

Times each row-wise kernel at training-batch shapes, then one full student
loss + backward step with each backend swapped in.

    python benchmarks/bench_kernels.py [--repeat 2000]
"""
import argparse
import timeit

import numpy as np

from mtdistill import kernels
from mtdistill.losses import DistillConfig, student_batch_loss
from mtdistill.model import NetConfig, init
from mtdistill.numerics import VA_GRID
from mtdistill.selfcheck import random_batch

KERNELS = ("sigmoid_rows", "softmax_rows", "softmax_xent", "sigmoid_bce", "bin_expectation_rows")


def kernel_cases(rng, rows):
    z8, z7, z20 = rng.normal(size=(rows, 8)), rng.normal(size=(rows, 7)), rng.normal(size=(rows, 20))
    t7 = np.exp(z7) / np.exp(z7).sum(axis=1, keepdims=True)
    y8 = (rng.random((rows, 8)) < 0.3).astype(float)
    return {
        "sigmoid_rows": (z8,),
        "softmax_rows": (z7, 1.5),
        "softmax_xent": (t7, z7, 1.5),
        "sigmoid_bce": (y8, z8),
        "bin_expectation_rows": (z20, VA_GRID.centers),
    }


def time_call(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=repeat, repeat=3)) / repeat * 1e6


def use_backend(module):
    for name in KERNELS:
        setattr(kernels, name, getattr(module, name))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=2000)
    parser.add_argument("--rows", type=int, default=12, help="rows per kernel call (3 tasks x N=4)")
    args = parser.parse_args(argv)

    names = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    if len(names) == 1:
        print("compiled extension not built; timing the numpy backend only")
    backends = {n: kernels.get_backend(n) for n in names}
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng, args.rows)

    print(f"{'kernel':<22}" + "".join(f"{n + ' us':>12}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for name in KERNELS:
        times = [time_call(getattr(backends[n], name), cases[name], args.repeat) for n in names]
        speed = f"{times[0] / times[1]:>11.1f}x" if len(times) == 2 else ""
        print(f"{name:<22}" + "".join(f"{t:>12.2f}" for t in times) + speed)

    teacher, student = init(NetConfig(seed=1)), init(NetConfig(seed=2))
    batch = random_batch(rng, n=(4, 4, 4), input_dim=32)
    cfg = DistillConfig()
    original = {name: getattr(kernels, name) for name in KERNELS}
    step = []
    try:
        for n in names:
            use_backend(backends[n])
            step.append(time_call(lambda: student_batch_loss(batch, teacher, student, cfg), (),
                                  max(1, args.repeat // 10)))
    finally:
        for name, fn in original.items():
            setattr(kernels, name, fn)
    speed = f"{step[0] / step[1]:>11.1f}x" if len(step) == 2 else ""
    print(f"{'student step (N=4)':<22}" + "".join(f"{t:>12.2f}" for t in step) + speed)


if __name__ == "__main__":
    main()
