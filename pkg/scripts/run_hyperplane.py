#!/usr/bin/env python3
"""Hyperplane-regression training comparison: sync vs solo (vs majority).

dim=64 target, 4096 samples, 8 ranks, 48 epochs, one randomly delayed rank
per round (200 us).  Prints per-flavor final validation MSE, total simulated
time, and sync-relative speedups; optionally writes per-round metrics.
"""

import argparse
import json
import sys

from eagercoll.eagersgd import DivergenceError
from eagercoll.harness import (DelayModel, RunConfig, run_training,
                               write_train_csv, write_jsonl, TRAIN_SCHEMA)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--flavors", default="sync,solo",
                    help="comma-separated subset of sync,solo,majority")
    ap.add_argument("--epochs", type=int, default=48)
    ap.add_argument("--skew-us", type=float, default=200.0)
    ap.add_argument("--stragglers", type=int, default=1,
                    help="ranks delayed per round")
    ap.add_argument("--seed", type=int, default=1234)
    ap.add_argument("--out", help="output stem for <stem>.csv + <stem>.jsonl")
    args = ap.parse_args()

    cfg = RunConfig(
        mode="train", flavors=tuple(args.flavors.split(",")), p=8,
        epochs=args.epochs, steps_per_epoch=4, dim=64, n_samples=4096,
        batch_per_rank=128, lr=0.05, tau=8, resync_period=8,
        delay=DelayModel("random_subset", unit_ms=args.skew_us / 1000.0,
                         k=args.stragglers, seed=11),
        link_latency_us=10, seed=args.seed, data_seed=99)
    try:
        report = run_training(cfg)
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3
    if args.out:
        write_train_csv(report.rows, args.out + ".csv")
        write_jsonl(args.out + ".jsonl", TRAIN_SCHEMA, report.rows)
    print(json.dumps({
        "final_val_mse": {f: report.final_val(f) for f in cfg.flavors},
        "sim_time_us": report.sim_time_us,
        "speedup_vs_sync": report.speedup_vs_sync,
    }, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
