"""Ledger peak and wall time of full vs streamed passes on the 3-conv benchmark net.

Writes one CSV row per run. Full passes that would exceed --full-limit-mb are
only projected from the shape trace (closed form), not executed.

    python3 scripts/memory_table.py --inputs 1024,2048,4096 --tiles 0,527,1039 --out table.csv
"""

import argparse
import csv
import sys

from streamcnn.cli import BENCH_FIELDS, bench_rows
from streamcnn.network import bundled_spec


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--inputs", default="1024,2048")
    ap.add_argument("--tiles", default="0,527,1039", help="0 = conventional full pass")
    ap.add_argument("--dtype", default="f32", choices=["f32", "f64"])
    ap.add_argument("--repeats", type=int, default=1)
    ap.add_argument("--full-limit-mb", type=float, default=2048)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.DictWriter(out, fieldnames=BENCH_FIELDS)
    w.writeheader()
    inputs = [int(v) for v in args.inputs.split(",")]
    tiles = [int(v) for v in args.tiles.split(",")]
    for row in bench_rows(bundled_spec("bench3"), inputs, tiles, args.dtype, args.repeats, full_limit_bytes=int(args.full_limit_mb * 2**20)):
        w.writerow(row)
        out.flush()
    if out is not sys.stdout:
        out.close()


if __name__ == "__main__":
    main()
