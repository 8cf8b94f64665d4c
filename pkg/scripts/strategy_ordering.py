"""Test accuracy of 1-wise, grouped-2, 2-wise and end-to-end on the synthetic image task.

    python scripts/strategy_ordering.py --seeds 4 --out ordering.csv

Writes one row per (strategy, seed) with per-head accuracies, then prints
the seed means. Four seeds take roughly 25 minutes on one CPU core.
"""

import argparse
import csv
import sys
from dataclasses import replace

from interlock import desk


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=4)
    ap.add_argument("--depth", type=int, default=6)
    ap.add_argument("--steps", type=int, default=desk.DeskSettings.steps)
    ap.add_argument("--out", default="ordering.csv")
    args = ap.parse_args()
    settings = replace(desk.DeskSettings(), steps=args.steps)

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "depth", "seed", "test_acc", "final_loss", "seconds", "train_heads", "test_heads"])

        def on_run(r):
            w.writerow([r.strategy, r.depth, r.seed, f"{r.test_acc:.4f}", f"{r.final_loss:.4f}", f"{r.seconds:.1f}",
                        ";".join(f"{a:.4f}" for a in r.train_heads), ";".join(f"{a:.4f}" for a in r.test_heads)])
            fh.flush()
            print(f"{r.strategy:>10} seed {r.seed}: test {r.test_acc:.3f} ({r.seconds:.0f}s)", file=sys.stderr)

        summary = desk.ordering_runs(range(args.seeds), args.depth, settings, on_run)

    print("strategy,mean_test_acc,mean_train_heads")
    for label in desk.ORDERING_STRATEGIES:
        heads = ";".join(f"{a:.3f}" for a in summary.mean_train_heads(label))
        print(f"{label},{summary.mean_test(label):.4f},{heads}")


if __name__ == "__main__":
    main()
