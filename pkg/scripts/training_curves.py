"""Loss curves of streamed and conventional SGD from one initialization.

    python3 scripts/training_curves.py --dtype f32 --epochs 100 --out curves.csv
"""

import argparse
import csv
import sys

from streamcnn.demo import MotifDataConfig, TrainConfig, train_demo


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--dtype", default="f64", choices=["f32", "f64"])
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--images", type=int, default=40)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed, dtype=args.dtype)
    records = train_demo(cfg, MotifDataConfig(n_images=args.images, size=args.size, seed=args.seed))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(out)
    w.writerow(["epoch", "loss_stream", "loss_full", "acc_stream", "acc_full", "abs_diff"])
    for r in records:
        w.writerow([r.epoch, repr(r.loss["stream"]), repr(r.loss["full"]), r.accuracy["stream"], r.accuracy["full"], repr(abs(r.loss["stream"] - r.loss["full"]))])
    if out is not sys.stdout:
        out.close()


if __name__ == "__main__":
    main()
