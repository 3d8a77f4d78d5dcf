"""Compare the numba and numpy im2col/col2im backends.

Each backend runs in its own interpreter because the choice is fixed at import
time by ``I2IC_NO_NUMBA``. Reports the median of several repeats for the raw
kernels and for one training step of the fast-profile U-Net.

    python benchmarks/bench_kernels.py [--repeats 5]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from i2icompress.numerics import kernels, Tape
from i2icompress.denoiser import UNetConfig, build
from i2icompress.diffusion import linear_beta_schedule, training_loss

repeats = int(sys.argv[1])

def median_time(fn):
    fn()  # warm-up (includes JIT compilation)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))

rng = np.random.default_rng(0)
x = rng.standard_normal((16, 32, 16, 16)).astype(np.float32)
cols = kernels.im2col(x, 3, 1, 1)
res = {"backend": kernels.BACKEND}
res["im2col 16x32x16x16 k3"] = median_time(lambda: kernels.im2col(x, 3, 1, 1))
res["col2im 16x32x16x16 k3"] = median_time(lambda: kernels.col2im(cols, x.shape, 3, 1, 1))
xs = rng.standard_normal((16, 64, 8, 8)).astype(np.float32)
res["im2col 16x64x8x8 k3 s2"] = median_time(lambda: kernels.im2col(xs, 3, 2, 1))

model = build(UNetConfig(image_size=16, in_channels=1, cond_channels=1, out_channels=1), 0)
sched = linear_beta_schedule(1000)
x0 = rng.uniform(-1, 1, (16, 1, 16, 16)).astype(np.float32)

def step():
    with Tape() as tape:
        loss = training_loss(model, x0, x0, sched, np.random.default_rng(1))
    tape.backward(loss)

res["train step (fast U-Net, batch 16)"] = median_time(step)
print(json.dumps(res))
"""


def run(no_numba: bool, repeats: int) -> dict:
    env = dict(os.environ, I2IC_NO_NUMBA="1" if no_numba else "0")
    out = subprocess.run([sys.executable, "-c", WORKER, str(repeats)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    fast, slow = run(False, args.repeats), run(True, args.repeats)
    if fast["backend"] != "numba":
        print("numba unavailable; both runs used the numpy backend")
    print(f"{'case':40s} {'numba ms':>10s} {'numpy ms':>10s} {'speed-up':>9s}")
    for key in fast:
        if key == "backend":
            continue
        a, b = fast[key] * 1e3, slow[key] * 1e3
        print(f"{key:40s} {a:10.2f} {b:10.2f} {b / a:8.2f}x")


if __name__ == "__main__":
    main()
