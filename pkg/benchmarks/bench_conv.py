"""Compare the numba and numpy convolution kernels.

Runs each backend in a fresh interpreter (the backend is fixed at import
time by ``EVDNET_BACKEND``) and reports forward, weight-gradient and full
network train-step timings.

    python benchmarks/bench_conv.py [--repeat 5] [--size 64] [--batch 8]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from evdnet import _kernels
from evdnet._backend import BACKEND
from evdnet.models import FusionSpec, build
from evdnet.tensor import mse_loss

repeat, size, batch = map(int, sys.argv[1:4])
rng = np.random.default_rng(0)
res = {"backend": BACKEND}

def best(fn):
    fn()  # warm-up (compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)

for k, i_c in ((3, 3), (5, 6), (7, 6), (3, 12)):
    xp = rng.normal(size=(batch, i_c, size + k - 1, size + k - 1))
    w = rng.normal(size=(3, i_c, k, k))
    b = np.zeros(3)
    out = np.empty((batch, 3, size, size))
    g = rng.normal(size=(batch, 3, size, size))
    gw = np.empty_like(w)
    macs = batch * 3 * i_c * k * k * size * size
    t = best(lambda: _kernels.conv_forward(xp, w, b, out))
    res[f"fwd k{k} c{i_c}"] = (t, macs / t / 1e9)
    t = best(lambda: _kernels.conv_grad_weight(xp, g, gw))
    res[f"gw  k{k} c{i_c}"] = (t, macs / t / 1e9)

for key in ("single", "K2:5"):
    net = build(FusionSpec.parse(key))
    frames = [rng.uniform(size=(batch, 3, size, size)) for _ in range(net.window)]
    target = rng.uniform(size=(batch, 3, size, size))
    def step():
        out, cache = net.forward(frames)
        _, g = mse_loss(out, target)
        net.backward(cache, g)
    res[f"step {key}"] = (best(step), None)
print(json.dumps(res))
"""


def run_backend(backend, repeat, size, batch):
    env = dict(os.environ, EVDNET_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", WORKER, str(repeat), str(size), str(batch)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--batch", type=int, default=8)
    args = ap.parse_args()
    results = {b: run_backend(b, args.repeat, args.size, args.batch) for b in ("numba", "numpy")}
    nb, np_ = results["numba"], results["numpy"]
    print(f"batch {args.batch}, {args.size}x{args.size}, best of {args.repeat}")
    print(f"{'case':<14} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'numba GMAC/s':>13}")
    for key in nb:
        if key == "backend":
            continue
        (tn, rate), (tp, _) = nb[key], np_[key]
        rate_s = f"{rate:13.2f}" if rate else " " * 13
        print(f"{key:<14} {1e3 * tn:10.2f} {1e3 * tp:10.2f} {tp / tn:8.2f} {rate_s}")


if __name__ == "__main__":
    main()
