"""Compare the numba and pure-numpy kernel backends.

Times each hot kernel at the shapes of a desk-scale training step (batch 4,
64x64, 8 base channels) and, in two child processes, one full training
step of forward, loss and backward with ``OVALSEG_DISABLE_NUMBA`` set to 0
and 1.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ovalseg import kernels as K

STEP_SNIPPET = """
import time, numpy as np
from ovalseg import kernels, network, training
cfg = network.NetConfig()
ps = network.ParameterSet.create(cfg, seed=0)
rng = np.random.default_rng(0)
x = rng.random((4, 1, 64, 64)).astype(np.float32)
y = (rng.random(x.shape) < 0.05).astype(np.float32)
def step(seed):
    p, cache = network.forward(cfg, ps.theta, x, "train", ps.buffers, seed=seed, keep_cache=True)
    _, dp = training.combined_loss(p, y, None, training.class_weights(y), training.LossConfig())
    network.backward(cfg, ps.theta, cache, dp)
step(0)
best = float("inf")
for r in range({repeat}):
    t = time.perf_counter(); step(r + 1); best = min(best, time.perf_counter() - t)
print(kernels.backend(), best)
"""


def _best(fn, repeat):
    fn()  # warm-up (numba compiles on first call)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 64, 64, 8)).astype(np.float32)
    x2 = x.reshape(-1, 8)
    out, arg = K.maxpool2_forward_numpy(x)
    d_pool = rng.normal(size=out.shape).astype(np.float32)
    mu, var = K.bn_stats_numpy(x2)
    inv_std = 1.0 / np.sqrt(var + 1e-5)
    g = np.ones(8, np.float32)
    b = np.zeros(8, np.float32)
    key = np.uint64(K.dropout_key(0, 1))
    th = K.keep_threshold(0.4)
    y, xh = K.bn_relu_drop_apply_numpy(x2, mu, inv_std, g, b, key, th, 1 / 0.6)
    dy = rng.normal(size=y.shape).astype(np.float32)
    g64 = g.astype(np.float64)
    return {
        "im2col3x3 (4x64x64x8)": lambda impl: getattr(K, f"im2col3x3_{impl}")(x),
        "maxpool2 forward": lambda impl: getattr(K, f"maxpool2_forward_{impl}")(x),
        "maxpool2 backward": lambda impl: getattr(K, f"maxpool2_backward_{impl}")(d_pool, arg),
        "bn stats (16384x8)": lambda impl: getattr(K, f"bn_stats_{impl}")(x2),
        "bn+relu+dropout apply": lambda impl: getattr(K, f"bn_relu_drop_apply_{impl}")(
            x2, mu, inv_std, g, b, key, th, 1 / 0.6),
        "bn+relu+dropout backward": lambda impl: getattr(K, f"bn_relu_drop_backward_{impl}")(
            dy, y, xh, g64, inv_std, 1 / 0.6, True),
    }


def full_step(repeat):
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, OVALSEG_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()
        out[name] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20, help="timing repetitions; the best is reported")
    ap.add_argument("--skip-step", action="store_true", help="only time the individual kernels")
    args = ap.parse_args()

    print(f"{'kernel':<28}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fn in kernel_cases().items():
        t_nb = _best(lambda: fn("numba"), args.repeat)
        t_np = _best(lambda: fn("numpy"), args.repeat)
        print(f"{name:<28}{1e3 * t_nb:>10.3f}{1e3 * t_np:>10.3f}{t_np / t_nb:>8.2f}x")
    if not args.skip_step:
        step = full_step(max(3, args.repeat // 4))
        print(f"{'training step fwd+bwd':<28}{1e3 * step['numba']:>10.1f}{1e3 * step['numpy']:>10.1f}"
              f"{step['numpy'] / step['numba']:>8.2f}x")


if __name__ == "__main__":
    main()
