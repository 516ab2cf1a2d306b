"""Time the compiled and numpy GRU kernels, and one training epoch on each.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedlaser import kernels


def kernel_times(repeat: int):
    rng = np.random.default_rng(0)
    rows = []
    for B, I, H in [(32, 1, 64), (32, 64, 32), (256, 1, 64), (1024, 64, 32)]:
        x = rng.normal(size=(B, 9, I))
        W, U, b = rng.normal(size=(I, 3 * H)) * 0.3, rng.normal(size=(H, 3 * H)) * 0.3, np.zeros(3 * H)
        g = rng.normal(size=(B, 9, H))
        for name, impl in sorted(kernels.available_backends().items()):
            hs, cache = impl.gru_forward(x, W, U, b)
            fwd = min(timeit.repeat(lambda: impl.gru_forward(x, W, U, b), number=20, repeat=repeat)) / 20
            bwd = min(timeit.repeat(lambda: impl.gru_backward(g, x, W, U, hs, cache),
                                    number=20, repeat=repeat)) / 20
            rows.append((f"B={B} I={I} H={H}", name, fwd * 1e6, bwd * 1e6))
    return rows


EPOCH_SNIPPET = """
import time, numpy as np
from fedlaser import kernels
from fedlaser.adam import Adam
from fedlaser.model import Batch, ModelConfig, init_params, train_epoch
rng = np.random.default_rng(0)
n = 3057
data = Batch(rng.uniform(size=(n, 9)), rng.uniform(size=(n, 4)), rng.uniform(size=n))
p = init_params(ModelConfig(), rng)
t = time.perf_counter()
train_epoch(data, p, Adam(lr=1e-3), 32, np.random.default_rng(1), 0.2)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def epoch_times():
    out = []
    for pure in ("0", "1"):
        env = dict(os.environ, FEDLASER_PURE_PYTHON=pure)
        res = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env,
                             capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()
        out.append((name, float(secs)))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"backends: {sorted(kernels.available_backends())}  (default: {kernels.BACKEND})")
    print(f"{'shape':<22}{'backend':<10}{'forward us':>12}{'backward us':>13}")
    for shape, name, f, b in kernel_times(args.repeat):
        print(f"{shape:<22}{name:<10}{f:>12.1f}{b:>13.1f}")
    print("\nfull-width training epoch, 3057 samples, batch 32:")
    for name, secs in epoch_times():
        print(f"  {name:<8}{secs:8.3f} s")


if __name__ == "__main__":
    main()
