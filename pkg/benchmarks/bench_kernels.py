"""Time the hot kernels under numba and under the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

The backend is fixed at import time, so each backend is measured in its own
subprocess (``DPFEDEMB_DISABLE_NUMBA`` set or unset). Numba timings exclude
the first call, which compiles or loads the on-disk cache.
"""

import argparse
import json
import os
import subprocess
import sys
import time

WORKER = r"""
import json, sys, time
import numpy as np
from dpfedemb import kernels
from dpfedemb.accounting import DEFAULT_ORDERS, rdp_subsampled_gaussian_step
from dpfedemb.model import MlpConfig, build_model, init_head
from dpfedemb.params import RngStream

repeat = int(sys.argv[1])
cfg = MlpConfig(32, (80,), 32)
theta, _ = build_model(cfg, 1, RngStream(0))
gen = np.random.default_rng(0)

def case(n_examples, n_classes, steps, batch):
    x = gen.normal(size=(n_examples, 32))
    y = gen.integers(0, n_classes, n_examples)
    omega = init_head(n_classes, 32, RngStream(1))
    idx = np.concatenate([gen.permutation(n_examples)[:batch] for _ in range(steps)]).astype(np.int64)
    off = np.arange(0, steps * batch + 1, batch, dtype=np.int64)
    w = np.ones_like(theta)
    return lambda: kernels.local_sgd(theta, omega, x, y, idx, off, cfg.dims, cfg.has_bias,
                                     kernels.ACT_RELU, False, 0.01, 1.0, 0.9, w)

cases = {
    "local_sgd vc=16 users K=10 B=32": case(320, 16, 10, 32),
    "local_sgd vc=512 classes K=10 B=32": case(320, 512, 10, 32),
    "local_sgd full batch 2048 K=10": case(2048, 64, 10, 2048),
    "rdp step, 257 orders": lambda: rdp_subsampled_gaussian_step(0.0131072, 1.28, DEFAULT_ORDERS),
}
out = {"backend": kernels.BACKEND}
for name, fn in cases.items():
    t0 = time.perf_counter(); fn(); first = time.perf_counter() - t0
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter(); fn(); times.append(time.perf_counter() - t0)
    out[name] = {"first_s": first, "median_ms": 1e3 * float(np.median(times))}
print(json.dumps(out))
"""


def run(backend: str, repeat: int) -> dict:
    env = dict(os.environ)
    if backend == "numpy":
        env["DPFEDEMB_DISABLE_NUMBA"] = "1"
    else:
        env.pop("DPFEDEMB_DISABLE_NUMBA", None)
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    t0 = time.perf_counter()
    numba_res = run("numba", args.repeat)
    numpy_res = run("numpy", args.repeat)
    print(f"{'kernel':40s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name in numba_res:
        if name == "backend":
            continue
        a = numba_res[name]["median_ms"]
        b = numpy_res[name]["median_ms"]
        print(f"{name:40s} {a:10.3f} {b:10.3f} {b / a:8.2f}x")
    print(f"(numba first-call cost incl. compile/cache load: "
          f"{max(v['first_s'] for k, v in numba_res.items() if k != 'backend'):.2f}s; "
          f"total {time.perf_counter() - t0:.1f}s)")


if __name__ == "__main__":
    main()
