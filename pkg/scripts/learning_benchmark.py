"""Train the default model on synthetic data and compare it against grid snapping.

    python scripts/learning_benchmark.py --steps 6000 --out results/learning.json
"""
import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from beatquant.experiments import BenchmarkConfig, run_learning_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=6000, help="at most 20000")
    ap.add_argument("--minutes", type=float, default=55.0, help="training wall-clock budget")
    ap.add_argument("--train-pieces", type=int, default=1300)
    ap.add_argument("--test-pieces", type=int, default=100)
    ap.add_argument("--eval-every", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    cfg = BenchmarkConfig(n_train_pieces=args.train_pieces, n_test_pieces=args.test_pieces, threads=args.threads)
    cfg.train = replace(cfg.train, steps=args.steps, seed=args.seed, eval_every=args.eval_every,
                        time_limit_sec=args.minutes * 60)

    def log(rec):
        if rec["kind"] == "eval" or rec["step"] % 100 == 0:
            print(json.dumps(rec), file=sys.stderr, flush=True)

    result = run_learning_benchmark(cfg, log=log)
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")


if __name__ == "__main__":
    main()
