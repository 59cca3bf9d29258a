"""Timing comparison between the compiled and numpy kernel backends.

Runs each hot kernel on representative shapes, then one full training step,
under every available backend. Usage:

    python benchmarks/bench_kernels.py [--rows 4096] [--cols 256] [--repeats 30]
"""

import argparse
import time

import numpy as np

import grle.kernels as K
from grle.data import collate, make_synthetic_task
from grle.model import ModelConfig, init_model
from grle.trainer import TrainConfig, naive_step


def best_of(fn, repeats):
    """Minimum wall time over repeats, in seconds."""
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(rows, cols, rng):
    x = rng.standard_normal((rows, cols)).astype(np.float32)
    gy = rng.standard_normal((rows, cols)).astype(np.float32)
    gain = rng.standard_normal(cols).astype(np.float32)
    y = K.softmax_rows(x)
    ylog = K.log_softmax_rows(x)
    inv = 1.0 / np.sqrt(np.mean(x.astype(np.float64) ** 2, axis=-1) + 1e-6)
    inv = inv.astype(np.float32)
    param = rng.standard_normal(rows * cols).astype(np.float32)
    grad = rng.standard_normal(rows * cols).astype(np.float32)
    m = np.zeros_like(param)
    v = np.zeros_like(param)
    return [
        ("softmax_rows", lambda: K.softmax_rows(x)),
        ("softmax_rows_backward", lambda: K.softmax_rows_backward(y, gy)),
        ("log_softmax_rows", lambda: K.log_softmax_rows(x)),
        ("log_softmax_rows_backward", lambda: K.log_softmax_rows_backward(ylog, gy)),
        ("gelu", lambda: K.gelu(x)),
        ("gelu_backward", lambda: K.gelu_backward(x, gy)),
        ("rms_norm_rows", lambda: K.rms_norm_rows(x, gain, 1e-6)),
        (
            "rms_norm_rows_backward",
            lambda: K.rms_norm_rows_backward(x, gain, inv, gy),
        ),
        (
            "adamw_update",
            lambda: K.adamw_update(
                param.copy(), grad, m.copy(), v.copy(), 1, 1e-3, 0.9, 0.999, 1e-8, 0.01
            ),
        ),
    ]


def training_step_case():
    examples, _ = make_synthetic_task(seed=0, n_train=32, n_eval=4, n_keys=8)
    model = init_model(ModelConfig(), seed=0)
    batch = collate(examples[:16], model.config.max_seq_len)
    config = TrainConfig(strategy="cl", batch_size=16, seed=0)

    def step():
        naive_step(model, batch, config)
        for p in model.parameters().values():
            p.grad = None

    return step


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=4096)
    parser.add_argument("--cols", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    backends = K.available_backends()
    print(f"backends: {', '.join(backends)}")
    if len(backends) < 2:
        print("compiled extension unavailable; timing the numpy backend only")

    rng = np.random.default_rng(0)
    results = {}
    for backend in backends:
        K.set_backend(backend)
        for name, fn in kernel_cases(args.rows, args.cols, rng):
            fn()  # warm up caches before timing
            results.setdefault(name, {})[backend] = best_of(fn, args.repeats)
        step = training_step_case()
        step()
        results.setdefault("full training step", {})[backend] = best_of(
            step, max(3, args.repeats // 10)
        )
    K.set_backend("auto")

    width = max(len(name) for name in results)
    header = f"{'kernel':<{width}}  " + "".join(f"{b:>12}" for b in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, times in results.items():
        row = f"{name:<{width}}  " + "".join(
            f"{times[b] * 1e3:>10.3f}ms" for b in backends
        )
        if len(backends) > 1:
            row += f"{times['python'] / times['cython']:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
