"""Finite-difference gradient check over several seeds and resolutions.

    python3 scripts/gradcheck_sweep.py --seeds 0 1 2 --resolutions 32 64
"""
import argparse
import time

import torch

from deformfit.gradcheck import run_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--resolutions", type=int, nargs="+", default=[32])
    ap.add_argument("--samples", type=int, default=10)
    args = ap.parse_args()
    torch.set_num_threads(1)

    print(f"{'res':>4s} {'seed':>4s} {'case':<12s} {'worst':>10s} {'tol':>7s}  status")
    failed = 0
    for res in args.resolutions:
        for seed in args.seeds:
            t = time.perf_counter()
            for r in run_suite(resolution=res, seed=seed, samples=args.samples):
                status = "ok" if r.passed else "FAIL"
                failed += not r.passed
                print(f"{res:4d} {seed:4d} {r.name:<12s} {r.report.worst:10.2e} {r.report.tolerance:7.0e}  {status}")
            print(f"     ({time.perf_counter() - t:.1f}s)")
    raise SystemExit(1 if failed else 0)


if __name__ == "__main__":
    main()
