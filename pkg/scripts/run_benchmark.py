#!/usr/bin/env python3
"""Run the synthetic end-to-end benchmark and print a summary.

Usage: scripts/run_benchmark.py [WORKDIR] [--seed N] [key=value ...]
"""

import argparse
import logging

import torch

from diffrec.benchmark import run_benchmark


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("workdir", nargs="?", default="runs/benchmark")
    parser.add_argument("overrides", nargs="*", metavar="key=value")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_intermixed_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(args.threads)

    res = run_benchmark(args.workdir, args.seed, args.overrides)
    print(f"tokenizer {res.tokenizer_seconds:.1f} s, collision rate {res.collision_rate:.3f}")
    print(f"train {res.train_seconds:.1f} s, best epoch {res.best_epoch}")
    print(f"random Recall@10 baseline {res.random_recall10:.4f}")
    for name, m in res.metrics.items():
        print(f"{name:>10}  R@1 {m['recall@1']:.4f}  R@5 {m['recall@5']:.4f}  R@10 {m['recall@10']:.4f}  N@10 {m['ndcg@10']:.4f}")


if __name__ == "__main__":
    main()
