#!/usr/bin/env python3
"""Randomized round-contract sweep: many (P, flavor, skew, tau) configs,
each audited for liveness, cross-rank bit-identity, flagged-subset-sum
correctness, NAP >= 1, and tau-bounded gradient staleness.

Exit 0 when every configuration is clean, 2 otherwise.
"""

import argparse
import sys

import numpy as np

from eagercoll.harness import DelayModel, RunConfig, run_training
from eagercoll.verify import check_round_contracts


def random_config(rng: np.random.Generator) -> RunConfig:
    p = int(rng.choice([2, 4, 8, 16], p=[0.35, 0.3, 0.2, 0.15]))
    flavor = str(rng.choice(["solo", "majority", "sync"], p=[0.45, 0.45, 0.1]))
    kind = str(rng.choice(["none", "constant", "linear_skew", "random_subset"]))
    kw = {"kind": kind, "unit_ms": float(rng.uniform(0.05, 2.0))}
    if kind == "random_subset":
        kw["k"] = int(rng.integers(1, p + 1))
        kw["seed"] = int(rng.integers(1 << 30))
    return RunConfig(
        mode="train", flavors=(flavor,), p=p, epochs=2, steps_per_epoch=3,
        dim=4, n_samples=64, batch_per_rank=4, lr=0.02,
        tau=int(rng.choice([1, 2, 4])), resync_period=1000,
        delay=DelayModel(**kw), seed=int(rng.integers(1 << 30)),
        data_seed=int(rng.integers(1 << 30)))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--configs", type=int, default=500)
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    bad = 0
    for i in range(args.configs):
        cfg = random_config(rng)
        flavor = cfg.flavors[0]
        rep = run_training(cfg)
        rounds = cfg.epochs * cfg.steps_per_epoch
        r = check_round_contracts(rep.recorders[flavor], cfg.p, tau=cfg.tau,
                         ledger=rep.ledgers[flavor], expect_rounds=rounds,
                         allow_pending_after=rounds - 1 - cfg.tau)
        if not r.ok:
            bad += 1
            print(f"config {i}: p={cfg.p} {flavor} {cfg.delay.kind} "
                  f"tau={cfg.tau}: {r.by_kind}")
    print(f"{args.configs - bad}/{args.configs} configurations clean")
    return 0 if bad == 0 else 2


if __name__ == "__main__":
    sys.exit(main())
