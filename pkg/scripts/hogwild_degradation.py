"""Final training loss of hogwild against 1-wise as the number of components grows.

    python scripts/hogwild_degradation.py --depths 3 4 5 --seeds 3

Both strategies update each component from a single loss; hogwild uses the
final loss with gradients delayed by the pipeline, 1-wise the component's
own loss with no delay. Positive excess means hogwild trains worse.
"""

import argparse
import csv
import sys
from dataclasses import replace

from interlock import desk


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--depths", type=int, nargs="+", default=[3, 4, 5])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--steps", type=int, default=desk.DeskSettings.steps)
    ap.add_argument("--lr", type=float, default=desk.DeskSettings.lr)
    ap.add_argument("--out", default="hogwild.csv")
    args = ap.parse_args()
    settings = replace(desk.DeskSettings(image_size=8), steps=args.steps, lr=args.lr)

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "depth", "seed", "final_loss", "test_acc", "seconds"])

        def on_run(r):
            w.writerow([r.strategy, r.depth, r.seed, f"{r.final_loss:.4f}", f"{r.test_acc:.4f}", f"{r.seconds:.1f}"])
            fh.flush()
            print(f"d={r.depth} {r.strategy:>8} seed {r.seed}: loss {r.final_loss:.3f}", file=sys.stderr)

        summary = desk.hogwild_runs(args.depths, range(args.seeds), settings, on_run)

    print("depth,mean_loss_1wise,mean_loss_hogwild,excess")
    for d in args.depths:
        print(f"{d},{summary.mean_loss('1-wise', d):.4f},{summary.mean_loss('hogwild', d):.4f},{desk.degradation(summary, d):+.4f}")


if __name__ == "__main__":
    main()
