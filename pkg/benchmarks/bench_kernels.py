"""Time the numba kernels against the numpy fallback.

Each backend runs in its own interpreter because the choice is fixed at
import time by LORAFL_DISABLE_NUMBA. Usage:

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best(fn, repeat):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def measure(repeat):
    from lorafl import _kernels as K
    from lorafl.config import default_config
    from lorafl.federation import Simulation
    from lorafl.numkit import RngStream
    from lorafl.training import local_train

    rng = np.random.default_rng(0)
    out = {"backend": K.backend()}

    G = rng.standard_normal((64, 64))
    out["jacobi_svd_64"] = _best(lambda: K.jacobi_sweeps(G.copy(), np.eye(64)), repeat)

    rows = rng.standard_normal((20, 20000))
    out["compensated_sum_20x20000"] = _best(lambda: K.compensated_sum(rows), repeat)

    x = rng.standard_normal((16, 16, 128))
    out["gelu_16x16x128"] = _best(lambda: [K.gelu(x) for _ in range(50)], repeat)

    h = rng.standard_normal((16 * 16, 32))
    g, b = np.ones(32), np.zeros(32)
    out["layernorm_fwd_256x32"] = _best(lambda: [K.layernorm_forward(h, g, b, 1e-5) for _ in range(50)], repeat)

    s = rng.standard_normal((64 * 16, 16))
    out["softmax_1024x16"] = _best(lambda: [K.softmax_rows(s) for _ in range(50)], repeat)

    cfg = default_config().with_overrides(["federation.local_epochs=1"])
    sim = Simulation(cfg)
    data = sim.client_data[0]
    vec = sim.layout.pack(sim.base, sim.adapters)

    def train():
        local_train(vec, sim.layout, sim.base, sim.adapters, data, 1, 0.01, 16, RngStream(0, ("bench",)))

    out["local_epoch"] = _best(train, max(1, repeat // 2))
    out["samples_per_epoch"] = int(data.labels.size)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        print(json.dumps(measure(args.repeat)))
        return

    results = []
    for disable in ("0", "1"):
        env = dict(os.environ, LORAFL_DISABLE_NUMBA=disable)
        cmd = [sys.executable, __file__, "--child", "--repeat", str(args.repeat)]
        proc = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
        results.append(json.loads(proc.stdout.strip().splitlines()[-1]))

    fast, slow = results
    print(f"{'kernel':28s} {fast['backend']:>10s} {slow['backend']:>10s} {'speedup':>8s}")
    for key in fast:
        if key in ("backend", "samples_per_epoch"):
            continue
        print(f"{key:28s} {fast[key] * 1e3:9.2f}ms {slow[key] * 1e3:9.2f}ms {slow[key] / fast[key]:7.2f}x")


if __name__ == "__main__":
    main()
