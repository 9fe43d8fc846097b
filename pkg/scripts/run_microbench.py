#!/usr/bin/env python3
"""Latency/NAP microbenchmark at P=32 under 1-32 ms linear skew.

Runs all three flavors for 64 rounds on the simulated transport and prints
the aggregate report; optionally emits the per-round CSV/JSONL pair.
"""

import argparse
import json
import sys

from eagercoll.harness import (DelayModel, RunConfig, bench_collectives,
                               summarize, write_bench_csv, write_jsonl,
                               BENCH_SCHEMA)
import dataclasses


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--p", type=int, default=32)
    ap.add_argument("--rounds", type=int, default=64)
    ap.add_argument("--unit-ms", type=float, default=1.0,
                    help="linear skew unit: rank r idles (r+1) units per round")
    ap.add_argument("--seed", type=int, default=1234)
    ap.add_argument("--out", help="output stem for <stem>.csv + <stem>.jsonl")
    args = ap.parse_args()

    cfg = RunConfig(p=args.p, rounds=args.rounds, vector_len=64,
                    delay=DelayModel("linear_skew", unit_ms=args.unit_ms),
                    link_latency_us=10, seed=args.seed)
    records = bench_collectives(cfg)
    if args.out:
        write_bench_csv(records, args.out + ".csv")
        write_jsonl(args.out + ".jsonl", BENCH_SCHEMA,
                    [dataclasses.asdict(b) for b in records])
    print(json.dumps(summarize(records), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
