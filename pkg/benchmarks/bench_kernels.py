"""Time the numba and numpy kernel backends on node-sized tensors.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Also times one training epoch of a desk-scale root network under each
backend (the backend is chosen at import, so each runs in a subprocess).
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from treecnn import kernels

CASES = {
    "im2col 64x16x28x28 k5": lambda rng: ("im2col", (rng.standard_normal((64, 16, 32, 32)).astype(np.float32), 5, 5)),
    "im2col 64x32x14x14 k3": lambda rng: ("im2col", (rng.standard_normal((64, 32, 16, 16)).astype(np.float32), 3, 3)),
    "col2im 64x16x28x28 k5": lambda rng: (
        "col2im", (rng.standard_normal((64 * 28 * 28, 16 * 25)).astype(np.float32), 64, 16, 32, 32, 5, 5)),
    "maxpool fwd 64x32x28x28": lambda rng: ("maxpool_forward", (rng.standard_normal((64, 32, 28, 28)).astype(np.float32), 2)),
}


def best_of(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for name, make in CASES.items():
        kernel, args = make(rng)
        row = {"case": name}
        for backend, impl in kernels.IMPLEMENTATIONS.items():
            row[backend] = best_of(impl[kernel], args, repeat)
        rows.append(row)
    return rows


EPOCH_SNIPPET = """
import time, numpy as np
from treecnn import kernels
from treecnn.nn import zoo
from treecnn.nn.network import Network, TrainingSchedule, train_network
rng = np.random.default_rng(0)
x = rng.standard_normal((512, 1, 28, 28)).astype(np.float32)
y = rng.integers(0, 6, 512)
net = Network(zoo.cifar100_root(6, (1, 28, 28), 8, 16), rng=0)
train_network(net, x[:32], y[:32], TrainingSchedule(epochs=1, batch_size=32))
t = time.perf_counter()
train_network(net, x, y, TrainingSchedule(epochs=1, batch_size=32))
print(kernels.BACKEND, time.perf_counter() - t)
"""


def epoch_times():
    out = {}
    for disable in ("0", "1"):
        env = dict(os.environ, TREECNN_DISABLE_NUMBA=disable)
        res = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, secs = res.stdout.split()
        out[backend] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results here")
    ap.add_argument("--skip-epoch", action="store_true")
    args = ap.parse_args()

    rows = kernel_table(args.repeat)
    print(f"{'case':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for r in rows:
        print(f"{r['case']:28s} {r['numpy'] * 1e3:10.2f} {r['numba'] * 1e3:10.2f} {r['numpy'] / r['numba']:8.2f}")
    result = {"kernels": rows}
    if not args.skip_epoch:
        ep = epoch_times()
        result["epoch"] = ep
        print(f"\none epoch, 512 images, desk root net: " + ", ".join(f"{k} {v:.2f}s" for k, v in sorted(ep.items())))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=2)


if __name__ == "__main__":
    main()
