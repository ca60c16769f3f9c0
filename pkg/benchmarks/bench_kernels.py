"""Compare the compiled and pure-Python convolution kernels.

    python benchmarks/bench_kernels.py [--repeat N]

Times each correlation primitive on layer geometries of the default model at
64x64 input, batch 8, for every available backend, plus one full training
step. Also checks the backends agree numerically.
"""
from __future__ import annotations

import argparse
import importlib.util
import time

import numpy as np

from residua import kernels, model, nn
from residua.tensor import Rng

# (name, in_c, out_c, size, k, stride) for the forward correlation of each case
CASES = [
    ("x1 k11 s2", 1, 32, 64, 11, 2),
    ("x2 k9 s2", 32, 64, 32, 9, 2),
    ("x3 k7 s2", 64, 128, 16, 7, 2),
    ("x4 k5 s1", 128, 128, 8, 5, 1),
    ("out k11 s1", 32, 1, 64, 11, 1),
]
BATCH = 8


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _bench_backend(name, repeat):
    kernels.use_backend(name)
    rng = np.random.default_rng(0)
    rows, outputs = [], {}
    for label, cin, cout, size, k, stride in CASES:
        x = rng.standard_normal((BATCH, cin, size, size)).astype(np.float32)
        w = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
        pad = k // 2
        y = kernels.corr_forward(x, w, stride, pad)
        g = rng.standard_normal(y.shape).astype(np.float32)
        t_f = _time(lambda: kernels.corr_forward(x, w, stride, pad), repeat)
        t_i = _time(lambda: kernels.corr_grad_input(g, w, size, size, stride, pad), repeat)
        t_w = _time(lambda: kernels.corr_grad_weight(x, g, k, stride, pad), repeat)
        outputs[label] = (y, kernels.corr_grad_input(g, w, size, size, stride, pad),
                          kernels.corr_grad_weight(x, g, k, stride, pad))
        rows.append((label, t_f, t_i, t_w))
    arch = model.build_default_architecture()
    params = model.init_params(arch, Rng(0))
    batch = rng.random((BATCH, 1, 64, 64)).astype(np.float32)

    def step():
        recon, cache = model.forward(arch, params, batch, mode="train")
        _, grad = nn.mse_loss(recon, batch)
        model.backward(arch, params, cache, grad)

    t_step = _time(step, max(1, repeat // 2))
    return rows, t_step, outputs


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    original = kernels.BACKEND
    backends = ["python"]
    if importlib.util.find_spec("residua._conv") is not None:
        backends.append("cython")
    results = {}
    for name in backends:
        results[name] = _bench_backend(name, args.repeat)
    kernels.use_backend(original)
    print(f"{'case':<12} {'backend':<8} {'forward ms':>11} {'grad_in ms':>11} {'grad_w ms':>11}")
    for i, case in enumerate(CASES):
        for name in backends:
            label, t_f, t_i, t_w = results[name][0][i]
            print(f"{label:<12} {name:<8} {t_f * 1e3:11.2f} {t_i * 1e3:11.2f} {t_w * 1e3:11.2f}")
    for name in backends:
        print(f"train step (batch {BATCH}, 64x64) {name}: {results[name][1] * 1e3:.1f} ms")
    if len(backends) == 2:
        worst = 0.0
        for label in results["python"][2]:
            for a, b in zip(results["python"][2][label], results["cython"][2][label]):
                worst = max(worst, float(np.max(np.abs(a - b)) / (np.max(np.abs(a)) + 1e-30)))
        print(f"max relative backend difference: {worst:.2e}")
        print(f"step speedup: {results['python'][1] / results['cython'][1]:.2f}x")
    else:
        print("compiled backend not built; only the fallback was timed")


if __name__ == "__main__":
    main()
