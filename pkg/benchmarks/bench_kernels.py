"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times the Jacobi SVD, im2col/col2im and one fine-tuning step with each
available backend swapped into ``parspace.kernels``.
"""

import argparse
import timeit

import numpy as np

from parspace import datagen, kernels, linalg, losses, optim, peft, segnet
from parspace import tensor as T

KERNELS = ("jacobi_rows", "im2col", "col2im")


def use(backend):
    for name in KERNELS:
        setattr(kernels, name, getattr(backend, name))


def cases():
    rng = np.random.default_rng(0)
    mats = [rng.standard_normal(s) for s in [(8, 36), (32, 64), (32, 288)]]
    xp = rng.standard_normal((4, 8, 34, 34))
    cols = kernels.python_backend.im2col(xp, 3, 3, 1)

    model = segnet.ToySamModel(seed=0)
    part = peft.apply_strategy(model, "parser:coeff:conv")
    img, mask, boxes = datagen.batch_arrays(datagen.generate("base", 2, 0))
    state = optim.AdamState(lr=1e-4)

    def step():
        optim.zero_grad(part.trainable)
        T.backward(losses.composite_loss(segnet.forward(model, img, boxes), mask))
        optim.adam_step(state, part.trainable, {n: t.grad for n, t in part.trainable.items()})

    return {
        "svd 8x36 + 32x64 + 32x288": lambda: [linalg.svd(m) for m in mats],
        "im2col 4x8x34x34 k3": lambda: kernels.im2col(xp, 3, 3, 1),
        "col2im 4x8x34x34 k3": lambda: kernels.col2im(cols, xp.shape, 3, 3, 1, 32, 32),
        "train step (parser, batch 2)": step,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    found = kernels.backends()
    results = {}
    for name, backend in found.items():
        use(backend)
        for label, fn in cases().items():
            fn()  # warm up
            results[label, name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    use(found.get("cython", found["python"]))

    names = list(found)
    print(f"{'case':32s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for label in cases():
        row = f"{label:32s}" + "".join(f"{results[label, n] * 1e3:10.2f}ms" for n in names)
        if len(names) > 1:
            row += f"{results[label, 'python'] / results[label, 'cython']:11.1f}x"
        print(row)
    if len(names) == 1:
        print("compiled extension not available; only the python backend was timed")


if __name__ == "__main__":
    main()
