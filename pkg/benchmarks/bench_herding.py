"""Time herding selection with the compiled kernel against the numpy fallback.

    python3 benchmarks/bench_herding.py --sizes 200 1000 5000 --dim 64 --budget 20
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from iclkit import herding


def bench(n: int, dim: int, budget: int, repeat: int, seed: int) -> dict:
    feats = np.random.default_rng(seed).normal(size=(n, dim))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    row = {"n": n, "dim": dim, "budget": budget}
    picks = {}
    for backend in ("python", "cython"):
        if backend == "cython" and herding.BACKEND != "cython":
            row[backend] = None
            continue
        timer = timeit.Timer(lambda: herding.herding_select(feats, budget, backend=backend))
        loops, _ = timer.autorange()
        row[backend] = min(timer.repeat(repeat, loops)) / loops
        picks[backend] = herding.herding_select(feats, budget, backend=backend)
    if row.get("cython"):
        row["speedup"] = row["python"] / row["cython"]
        row["same_selection"] = picks["python"] == picks["cython"]
    return row


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[100, 500, 2000, 8000])
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--budget", type=int, default=20)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--json", action="store_true", help="emit one JSON record per size")
    args = parser.parse_args(argv)

    if not args.json:
        print(f"compiled kernel available: {herding.BACKEND == 'cython'}")
        print(f"{'n':>7} {'python (ms)':>12} {'cython (ms)':>12} {'speedup':>8}  same")
    for n in args.sizes:
        row = bench(n, args.dim, args.budget, args.repeat, args.seed)
        if args.json:
            print(json.dumps(row))
        elif row["cython"] is None:
            print(f"{n:>7} {1e3 * row['python']:>12.3f} {'n/a':>12}")
        else:
            print(f"{n:>7} {1e3 * row['python']:>12.3f} {1e3 * row['cython']:>12.3f} "
                  f"{row['speedup']:>7.1f}x  {row['same_selection']}")


if __name__ == "__main__":
    main()
