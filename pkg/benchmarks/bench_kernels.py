"""Compare the numba and pure-numpy kernel paths.

Times each hot kernel on MNIST- and CIFAR-sized activations with both
backends, then one full training step of the tiny model under each. Prints
a table of median wall-clock milliseconds and the numpy/numba ratio.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--precision float32]
"""

import argparse
import statistics
import time

import numpy as np

from branch_distill import _kernels as K
from branch_distill import autodiff as ad
from branch_distill.losses import LossWeights
from branch_distill.nn import build_branched_classifier
from branch_distill.train import SGD, StepContext, build_critic, train_step


def median_ms(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return 1e3 * statistics.median(times)


def kernel_cases(dtype):
    rng = np.random.default_rng(0)
    cases = []
    for label, shape in (("mnist 64x16x30x30", (64, 16, 30, 30)), ("cifar 64x32x18x18", (64, 32, 18, 18))):
        xp = rng.standard_normal(shape).astype(dtype)
        cols = K.im2col(xp, 3, 3, 1, use_numba=False)
        hp, wp = shape[2], shape[3]
        pool_in = np.ascontiguousarray(xp[:, :, : hp // 2 * 2, : wp // 2 * 2])
        _, idx = K.maxpool_forward(pool_in, 2, 2, use_numba=False)
        dout = rng.standard_normal(idx.shape).astype(dtype)
        cases += [
            (f"im2col 3x3 {label}", lambda nb, xp=xp: K.im2col(xp, 3, 3, 1, use_numba=nb)),
            (f"col2im 3x3 {label}", lambda nb, c=cols, h=hp, w=wp: K.col2im(c, h, w, 1, use_numba=nb)),
            (f"maxpool fwd {label}", lambda nb, x=pool_in: K.maxpool_forward(x, 2, 2, use_numba=nb)),
            (f"maxpool bwd {label}", lambda nb, g=dout, i=idx, s=pool_in.shape: K.maxpool_backward(g, i, s, 2, 2, use_numba=nb)),
        ]
    return cases


def step_case(dtype, use_numba):
    """One generator+critic step of tiny-resnet on a 64-image MNIST-shaped batch."""
    ad.set_default_dtype(dtype)
    rng = np.random.default_rng(0)
    model = build_branched_classifier("tiny-resnet", classes=10, seed=0, in_channels=1, image_size=(28, 28))
    critic = build_critic(10, (1, 28, 28), np.random.default_rng(1))
    ctx = StepContext(
        weights=LossWeights(),
        gen_opt=SGD(model.named_parameters(), 0.01),
        critic_opt=SGD(critic.named_parameters(), 0.001),
        eps_rng=np.random.default_rng(2),
    )
    x = rng.standard_normal((64, 1, 28, 28)).astype(dtype)
    y = rng.integers(0, 10, 64)

    def run():
        saved = K.USE_NUMBA
        K.USE_NUMBA = use_numba
        try:
            train_step(model, critic, x, y, ctx)
        finally:
            K.USE_NUMBA = saved

    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--precision", choices=("float32", "float64"), default="float32")
    args = ap.parse_args()
    dtype = np.dtype(args.precision)
    if not K._HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    print(f"{'case':<40} {'numpy ms':>10} {'numba ms':>10} {'ratio':>7}")
    for name, fn in kernel_cases(dtype):
        a = median_ms(lambda: fn(False), args.repeat)
        b = median_ms(lambda: fn(True), args.repeat)
        print(f"{name:<40} {a:>10.3f} {b:>10.3f} {a / b:>7.2f}")
    reps = max(3, args.repeat // 4)
    a = median_ms(step_case(dtype, False), reps)
    b = median_ms(step_case(dtype, True), reps)
    print(f"{'train step tiny-resnet b=64':<40} {a:>10.3f} {b:>10.3f} {a / b:>7.2f}")


if __name__ == "__main__":
    main()
