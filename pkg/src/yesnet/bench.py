"""Benchmark the numba kernels against the pure-numpy fallback.

Run as ``python -m yesnet.bench``. Cases cover the convolution/pool shapes
the desk-scale backbone actually hits, plus one full train-step macro case.
Also reports the max elementwise deviation between the two backends (they
may differ in the last bits: different accumulation orders).
"""

import argparse
import time

import numpy as np

from . import backend


def _time(fn, budget):
    fn()  # warmup / jit compile
    t0 = time.perf_counter()
    n = 0
    while time.perf_counter() - t0 < budget:
        fn()
        n += 1
    return (time.perf_counter() - t0) / n


def kernel_cases():
    rng = np.random.default_rng(0)
    cases = []
    conv_shapes = [
        ("conv 3x3  3->8   @64", (16, 3, 64, 64), (8, 3, 3, 3), 1),
        ("conv 3x3  8->16  @32", (16, 8, 32, 32), (16, 8, 3, 3), 1),
        ("conv 3x3 16->32  @16", (16, 16, 16, 16), (32, 16, 3, 3), 1),
        ("conv 3x3 32->32  @8 ", (16, 32, 8, 8), (32, 32, 3, 3), 1),
        ("conv 3x3 64->64  @4 ", (16, 64, 4, 4), (64, 64, 3, 3), 1),
        ("conv 1x1 32->64  @8 ", (16, 32, 8, 8), (64, 32, 1, 1), 0),
    ]
    for label, xs, ws, pad in conv_shapes:
        x = rng.uniform(-1, 1, xs)
        w = rng.uniform(-1, 1, ws) * 0.2
        gy = rng.uniform(-1, 1, (xs[0], ws[0], xs[2], xs[3]))

        def fwd(k, x=x, w=w, pad=pad):
            return k.conv2d_forward(x, w, 1, pad)

        def bwd(k, x=x, w=w, gy=gy, pad=pad):
            return k.conv2d_backward(x, w, gy, 1, pad)

        cases.append((label + " fwd", fwd))
        cases.append((label + " bwd", bwd))

    xp = rng.uniform(-1, 1, (16, 32, 16, 16))

    def pool_fwd(k, x=xp):
        return k.maxpool2_forward(x)

    cases.append(("maxpool 2x2 @16      fwd", pool_fwd))
    return cases


def backbone_case():
    from . import autodiff as ad
    from .backbone import ShunNet, ShunNetConfig

    net = ShunNet(ShunNetConfig())
    x = np.random.default_rng(1).uniform(0, 1, (16, 3, 64, 64))
    onehot = np.zeros((16, 3))
    onehot[np.arange(16), np.arange(16) % 3] = 1.0

    def step(_k):
        with ad.Tape() as tape:
            probs = net.classify(ad.Tensor(x))
            picked = ad.multiply(probs, ad.constant(onehot)).sum(axis=1)
            loss = ad.scalar_mul(ad.log(picked).sum(), -1.0 / 16)
            ad.backward(loss, tape)
        return loss.item()

    return ("backbone fwd+bwd bs16", step)


def run(budget=0.3, include_macro=True):
    rows = []
    cases = kernel_cases()
    if include_macro:
        cases.append(backbone_case())
    for label, fn in cases:
        times = {}
        outputs = {}
        for name in ("numpy", "numba"):
            backend.set_backend(name)
            k = backend.kernels()
            times[name] = _time(lambda: fn(k), budget)
            outputs[name] = fn(k)
        diff = _max_diff(outputs["numpy"], outputs["numba"])
        rows.append((label, times["numpy"], times["numba"], diff))
    return rows


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    if isinstance(a, float):
        return abs(a - b)
    return float(np.abs(np.asarray(a, dtype=np.float64)
                        - np.asarray(b, dtype=np.float64)).max())


def main(argv=None):
    parser = argparse.ArgumentParser(description="numba vs numpy kernel benchmark")
    parser.add_argument("--budget", type=float, default=0.3,
                        help="seconds of timing per case and backend")
    parser.add_argument("--no-macro", action="store_true")
    args = parser.parse_args(argv)
    rows = run(budget=args.budget, include_macro=not args.no_macro)
    width = max(len(r[0]) for r in rows)
    print(f"{'case':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>7}  {'max|diff|':>9}")
    for label, t_np, t_nb, diff in rows:
        print(f"{label:<{width}}  {t_np * 1e3:>8.2f}ms  {t_nb * 1e3:>8.2f}ms  "
              f"{t_np / t_nb:>6.2f}x  {diff:>9.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
