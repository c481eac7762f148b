"""Time each kernel under the numpy and numba backends, plus one model training step.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--dims 32]

Numba functions are warmed up (compiled) before timing. Results also check
that both backends produce the same numbers.
"""
import argparse
import time

import numpy as np

from fastersnn import kernels
from fastersnn.kernels import _numba, _numpy


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n, rng):
    c, k = 16, 3
    xp = rng.standard_normal((2, c, n + 2, n + 2, n + 2)).astype(np.float32)
    cols = _numpy.im2col(xp, k, 1, (0, 0, 0), (n, n, n))
    w = rng.standard_normal((c, k ** 3)).astype(np.float32)
    gout = rng.standard_normal((2, c, n, n, n)).astype(np.float32)
    x = rng.standard_normal((2, c, n, n, n)).astype(np.float32)
    half = (n // 2,) * 3
    _, arg = _numpy.maxpool_forward(x, 2, 2, half)
    gpool = rng.standard_normal((2, c) + half).astype(np.float32)
    seq = rng.standard_normal((2, 2 * c * n ** 3)).astype(np.float32)
    spikes, v_pre = _numpy.lif_forward(seq, 0.9, 1.0)
    return {
        "im2col": lambda m: m.im2col(xp, k, 1, (0, 0, 0), (n, n, n)),
        "col2im": lambda m: m.col2im(cols, xp.shape, k, 1, (0, 0, 0), (n, n, n)),
        "depthwise_forward": lambda m: m.depthwise_forward(xp, w, k, 1, (n, n, n)),
        "depthwise_backward": lambda m: m.depthwise_backward(xp, w, gout, k, 1),
        "maxpool_forward": lambda m: m.maxpool_forward(x, 2, 2, half),
        "maxpool_backward": lambda m: m.maxpool_backward(gpool, arg, x.shape, 2, 2),
        "lif_forward": lambda m: m.lif_forward(seq, 0.9, 1.0),
        "lif_backward": lambda m: m.lif_backward(seq, spikes, v_pre, 0.9, 1.0, 1.0, 0.5),
    }


def same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(u, v, rtol=1e-5, atol=1e-5) for u, v in zip(a, b))


def model_step(dims, repeat):
    from fastersnn.model import ModelConfig, build_model
    from fastersnn.tensor import backward
    from fastersnn.training import compute_loss
    cfg = ModelConfig(input_dims=(dims,) * 3, stage_channels=(8, 16, 32, 64), msf_out_channels=32)
    model = build_model(cfg).train()
    x = np.random.default_rng(0).standard_normal((2, 4, 1) + cfg.input_dims).astype(np.float32)

    def step():
        model.zero_grad()
        backward(compute_loss(model.forward(x).logits_per_step, [0, 1, 2, 0]))
    step()
    return best_of(step, repeat)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dims", type=int, default=32)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    table = cases(args.dims, rng)
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  match")
    for name, call in table.items():
        ok = same(call(_numpy), call(_numba))   # also compiles the numba version
        tn = best_of(lambda: call(_numpy), args.repeat)
        tb = best_of(lambda: call(_numba), args.repeat)
        print(f"{name:<20} {tn * 1e3:>10.2f} {tb * 1e3:>10.2f} {tn / tb:>7.1f}x  {ok}")
    print()
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        t = model_step(args.dims, max(1, args.repeat // 2))
        print(f"train step (B=4, T=2, {args.dims}^3) [{backend}]: {t:.3f} s")


if __name__ == "__main__":
    main()
