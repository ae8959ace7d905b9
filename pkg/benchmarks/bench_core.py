"""Compare the compiled cache core with its pure-Python twin.

    python benchmarks/bench_core.py [--ops N] [--repeat R] [--json FILE]

Three workloads run on each backend: a random stream of single hierarchy
operations, the bulk eviction-test kernel, and one full eviction-set
construction through the machine layer. Each backend must end in the same
state, so the numbers compare equal work.
"""

from __future__ import annotations

import argparse
import json
import random
import statistics
import sys
import time

import numpy as np

from demotesim import evset, vm
from demotesim.cache import BACKENDS, HierarchyConfig, new_hierarchy
from demotesim.machine import Machine

TARGET_VA = 0x100000040


def random_ops(backend: str, n: int, seed: int = 1):
    h = new_hierarchy(HierarchyConfig(), backend)
    r = random.Random(seed)
    lines = [r.randrange(1 << 24) for _ in range(4096)]
    ops = [(r.randrange(10), r.randrange(12), r.choice(lines)) for _ in range(n)]
    t0 = time.perf_counter()
    for op, core, x in ops:
        if op < 5:
            h.load(core, x)
        elif op < 7:
            h.demote(core, x)
        elif op < 8:
            h.store(core, x)
        elif op < 9:
            h.flush(x)
        else:
            h.prefetch_fill(core, x)
    return time.perf_counter() - t0, h.snapshot()


def evtest_kernel(backend: str, n: int, seed: int = 2):
    h = new_hierarchy(HierarchyConfig(), backend)
    r = np.random.default_rng(seed)
    pool = r.integers(0, 1 << 24, size=2048, dtype=np.int64)
    calls = max(1, n // 256)
    t0 = time.perf_counter()
    for i in range(calls):
        members = pool[(i * 64) % 1984:(i * 64) % 1984 + 64]
        h.evtest(int(pool[-1]), members, members, i % 2, 0, 1, 0)
    return time.perf_counter() - t0, h.snapshot()


def construct(backend: str, n: int, seed: int = 3):
    m = Machine(seed=seed, backend=backend)
    m.map(TARGET_VA & ~0xFFF, vm.PAGE_SIZE)
    t0 = time.perf_counter()
    es, st = evset.construct(m, TARGET_VA, "cldemote")
    return time.perf_counter() - t0, (st.success, st.memory_ops, st.simulated_cycles)


WORKLOADS = {"random_ops": random_ops, "evtest_kernel": evtest_kernel,
             "construct": construct}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ops", type=int, default=200_000, help="operations per micro workload")
    ap.add_argument("--repeat", type=int, default=3, help="timed repetitions (median kept)")
    ap.add_argument("--only", choices=sorted(WORKLOADS), action="append")
    ap.add_argument("--json", dest="json_out", default=None, help="write results here")
    args = ap.parse_args(argv)

    if "cython" not in BACKENDS:
        print("compiled core not available (unset DEMOTESIM_PURE and build the extension)",
              file=sys.stderr)
        return 1
    results = {}
    for name in args.only or list(WORKLOADS):
        fn = WORKLOADS[name]
        row = {}
        states = {}
        for backend in ("python", "cython"):
            times = []
            for _ in range(args.repeat):
                dt, state = fn(backend, args.ops)
                times.append(dt)
            row[backend] = statistics.median(times)
            states[backend] = state
        if states["python"] != states["cython"]:
            print(f"{name}: backends disagree on the final state", file=sys.stderr)
            return 2
        row["speedup"] = row["python"] / row["cython"]
        results[name] = row
        print(f"{name:14s} python {row['python']:8.3f}s  cython {row['cython']:8.3f}s  "
              f"x{row['speedup']:.1f}")
    if args.json_out:
        with open(args.json_out, "w") as f:
            json.dump({"ops": args.ops, "repeat": args.repeat, "results": results}, f,
                      indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
