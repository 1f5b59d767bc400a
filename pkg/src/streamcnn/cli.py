"""Command-line entry point: ``streamcnn {equiv,probe,bench,train-demo,saliency}``.

Exit codes: 0 success, 2 bad network/plan/input, 3 equivalence failure, 4 out of memory or I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import memory_ledger
from .demo import MotifDataConfig, TrainConfig, train_demo
from .network import (
    Network,
    NetworkSpec,
    SpecError,
    backward_full,
    forward_full,
    init_network,
    load_spec,
)
from .overlap_probe import NonContiguousInvalidRegion, TileTooSmall, analytic_overlap, probe
from .streaming import (
    full_pass_bytes,
    plan_grid,
    plan_tiles,
    saliency,
    stream_backward,
    stream_forward,
)
from .tensor_core import DTypeError, PlacementError, ShapeError, dtype_of, load_tensor, save_tensor

EXIT_OK, EXIT_SPEC, EXIT_EQUIV, EXIT_RESOURCE = 0, 2, 3, 4

TOLERANCE = {
    "f64": {"forward_abs": 1e-12, "grad_abs": 1e-10},
    "f32": {"forward_abs": 1e-5, "grad_rel": 1e-4},
}


def parse_pair(text: str) -> tuple[int, ...]:
    parts = tuple(int(v) for v in text.lower().split("x"))
    if not 1 <= len(parts) <= 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected N or HxW with positive entries, got {text!r}")
    return parts


def load_input(arg: str, channels: int, batch: int, dtype: str, seed: int) -> np.ndarray:
    """``random:HxW:seed`` or a STEN1 file holding (B, C, H, W)."""
    if arg.startswith("random:"):
        parts = arg.split(":")
        size = parse_pair(parts[1])
        s = int(parts[2]) if len(parts) > 2 else seed
        return np.random.default_rng(s).normal(size=(batch, channels, *size)).astype(dtype_of(dtype))
    x = load_tensor(arg)
    if x.ndim not in (3, 4):
        raise ShapeError(f"{arg}: expected a (B, C, W) or (B, C, H, W) tensor, got {x.shape}")
    return x.astype(dtype_of(dtype))


def _net(args, input_shape) -> Network:
    spec = load_spec(args.net)
    if getattr(args, "split", None):
        spec = type(spec)(spec.layers, args.split, spec.dtype)
    spec = spec.with_dtype(args.dtype or spec.dtype)
    return init_network(spec, input_shape, seed=args.seed)


def _grid(text: str, rank: int) -> tuple[int, ...]:
    g = parse_pair(text)
    return g * rank if len(g) == 1 else g


def _grad_ok(a: np.ndarray, b: np.ndarray, dtype: str, scale: float) -> tuple[bool, float]:
    """f64: absolute bound. f32: bound relative to ``scale``, the layer's largest gradient entry."""
    diff = float(np.max(np.abs(a - b))) if a.size else 0.0
    tol = TOLERANCE[dtype]
    if "grad_abs" in tol:
        return diff <= tol["grad_abs"], diff
    return diff <= tol["grad_rel"] * max(scale, float(np.finfo(np.float32).tiny)), diff


def layer_scale(arrays) -> float:
    return max((float(np.max(np.abs(a))) for a in arrays if a.size), default=0.0)


def equivalence_report(net: Network, x: np.ndarray, plan, loss_seed: int = 0, threads: int = 1) -> tuple[dict, dict]:
    """Compare streamed and conventional passes; returns (report, tensors for dumping)."""
    dtype = net.spec.dtype
    pf, store = forward_full(net, x)
    g = np.random.default_rng(loss_seed).uniform(-1, 1, pf.shape).astype(pf.dtype)
    gf = backward_full(net, store, g)
    ps, state = stream_forward(net, x, plan, threads)
    gs = stream_backward(net, x, plan, state, g, input_grad=0 in plan.levels, threads=threads)
    fwd = float(np.max(np.abs(pf - ps)))
    ok = fwd <= TOLERANCE[dtype]["forward_abs"]
    worst, where = 0.0, None
    for l, (a_list, b_list) in enumerate(zip(gf.params, gs.params)):
        scale = layer_scale(a_list)
        for j, (a, b) in enumerate(zip(a_list, b_list)):
            good, d = _grad_ok(a, b, dtype, scale)
            ok &= good
            if d > worst:
                worst = d
                where = {"layer": l, "param": "kernel" if j == 0 else "bias", "index": list(map(int, np.unravel_index(np.argmax(np.abs(a - b)), a.shape)))}
    report = {
        "max_abs_forward_diff": fwd,
        "max_abs_grad_diff": worst,
        "pass": bool(ok),
        "dtype": dtype,
        "n_tiles": plan.n_tiles,
        "tile_size": list(plan.tile_size),
        "worst_grad": where,
    }
    dumps = {"pred_full": pf, "pred_stream": ps}
    if gs.input is not None:
        d_in = np.abs(gf.input - gs.input)
        report["max_abs_input_grad_diff"] = float(d_in.max())
        report["input_grad_diff_region"] = _bbox(d_in.max(axis=(0, 1)) > 0)
        dumps["input_grad_diff"] = d_in
    for l, (a_list, b_list) in enumerate(zip(gf.params, gs.params)):
        for j, (a, b) in enumerate(zip(a_list, b_list)):
            dumps[f"grad_diff_l{l}_{'w' if j == 0 else 'b'}"] = np.abs(a - b)
    return report, dumps


def _bbox(mask: np.ndarray):
    if not mask.any():
        return None
    idx = np.argwhere(mask)
    return [[int(a), int(b) + 1] for a, b in zip(idx.min(axis=0), idx.max(axis=0))]


# -- commands ----------------------------------------------------------------------


def cmd_equiv(args) -> int:
    x = load_input(args.input, args.channels, args.batch, args.dtype or "f64", args.seed)
    net = _net(args, x.shape)
    plan = plan_grid(net.spec, x.shape[2:], _grid(args.tiles, x.ndim - 2), input_grad=True, corrupt_overlap=args.corrupt_overlap)
    report, dumps = equivalence_report(net, x, plan, loss_seed=args.seed, threads=args.threads)
    print(json.dumps(report, indent=1))
    if args.dump:
        out = Path(args.dump)
        out.mkdir(parents=True, exist_ok=True)
        for name, t in dumps.items():
            save_tensor(out / f"{name}.sten", np.ascontiguousarray(t))
    return EXIT_OK if report["pass"] else EXIT_EQUIV


def cmd_probe(args) -> int:
    spec = load_spec(args.net)
    if args.split:
        spec = type(spec)(spec.layers, args.split, spec.dtype)
    spec = spec.with_dtype(args.dtype or spec.dtype)
    tile = args.tile
    report = probe(spec, tile)
    doc = report.to_json()
    doc["matches_closed_form"] = report == analytic_overlap(spec, tile)
    print(json.dumps(doc, indent=1))
    return EXIT_OK if doc["matches_closed_form"] else EXIT_EQUIV


def _timed_run(net: Network, x: np.ndarray, plan) -> tuple[float, float, int]:
    with memory_ledger.tracking() as led:
        t0 = time.perf_counter()
        if plan is None:
            pred, store = forward_full(net, x)
        else:
            pred, state = stream_forward(net, x, plan)
        t1 = time.perf_counter()
        g = np.ones_like(pred)
        if plan is None:
            backward_full(net, store, g)
        else:
            stream_backward(net, x, plan, state, g)
        t2 = time.perf_counter()
    return (t1 - t0) * 1e3, (t2 - t1) * 1e3, led.peak_bytes


def bench_rows(net, inputs, tiles, dtype, repeats, seed=0, full_limit_bytes=2 << 30, channels=3):
    """Yield benchmark rows for a network file or spec.

    Tile size 0 means the conventional full pass; a tile >= input streams one tile.
    """
    base = net if isinstance(net, NetworkSpec) else load_spec(net)
    for n in inputs:
        x = np.random.default_rng(seed).normal(size=(1, channels, n, n)).astype(dtype_of(dtype))
        spec = base.with_dtype(dtype)
        net = init_network(spec, x.shape, seed=seed)
        closed = full_pass_bytes(net, x.shape)
        for t in tiles:
            full = t == 0
            if full and closed > full_limit_bytes:
                yield {"mode": "full", "input": n, "tile": n, "n_tiles": 1, "repeat": 0, "forward_ms": "", "backward_ms": "", "peak_bytes": "", "full_pass_bytes": closed}
                continue
            plan = None if full else plan_tiles(net.spec, (n, n), t)
            for r in range(repeats):
                f_ms, b_ms, peak = _timed_run(net, x, plan)
                yield {
                    "mode": "full" if full else "stream",
                    "input": n,
                    "tile": t if not full else n,
                    "n_tiles": 1 if full else plan.n_tiles,
                    "repeat": r,
                    "forward_ms": round(f_ms, 3),
                    "backward_ms": round(b_ms, 3),
                    "peak_bytes": peak,
                    "full_pass_bytes": closed,
                }
            del plan


BENCH_FIELDS = ["mode", "input", "tile", "n_tiles", "repeat", "forward_ms", "backward_ms", "peak_bytes", "full_pass_bytes"]


def _csv_out(path):
    return open(path, "w", newline="") if path else nullcontext(sys.stdout)


def cmd_bench(args) -> int:
    dtype = args.dtype or "f32"
    with _csv_out(args.out) as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        w.writeheader()
        for row in bench_rows(args.net, args.inputs, args.tiles, dtype, args.repeats, args.seed, int(args.full_limit_mb * 2**20)):
            w.writerow(row)
            fh.flush()
    return EXIT_OK


def cmd_train_demo(args) -> int:
    cfg = TrainConfig(epochs=args.epochs, batch=args.batch, lr=args.lr, grid=_grid(args.tiles, 2), seed=args.seed, dtype=args.dtype or "f64", mode=args.mode)
    data = MotifDataConfig(n_images=args.images, size=args.size, seed=args.seed)
    records = train_demo(cfg, data)
    modes = ["stream", "full"] if args.mode == "both" else [args.mode]
    fields = ["epoch"] + [f"loss_{m}" for m in modes] + [f"acc_{m}" for m in modes] + (["abs_diff"] if len(modes) == 2 else [])
    with _csv_out(args.out) as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in records:
            row = {"epoch": r.epoch, **{f"loss_{m}": repr(r.loss[m]) for m in modes}, **{f"acc_{m}": r.accuracy[m] for m in modes}}
            if len(modes) == 2:
                row["abs_diff"] = repr(abs(r.loss["stream"] - r.loss["full"]))
            w.writerow(row)
    return EXIT_OK


def cmd_saliency(args) -> int:
    x = load_input(args.input, args.channels, args.batch, args.dtype or "f64", args.seed)
    net = _net(args, x.shape)
    plan = plan_grid(net.spec, x.shape[2:], _grid(args.tiles, x.ndim - 2), input_grad=True)
    sal = saliency(net, x, plan, args.class_index, threads=args.threads)
    save_tensor(args.out, sal)
    print(json.dumps({"out": str(args.out), "shape": list(sal.shape), "n_tiles": plan.n_tiles}))
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dtype", choices=["f32", "f64"], default=None, help="overrides the network file's dtype")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="tiles processed concurrently (results reduced in tile order)")
    p.add_argument("--ledger", type=Path, default=None, help="write the allocation event log as JSON")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="streamcnn", description="Train and verify CNNs streamed tile by tile.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("equiv", help="compare streamed and conventional passes")
    _common(p)
    p.add_argument("--net", required=True)
    p.add_argument("--input", required=True, help="STEN1 file or random:HxW[:seed]")
    p.add_argument("--tiles", default="2x2", help="tile grid RxC")
    p.add_argument("--channels", type=int, default=3, help="channels of a random input")
    p.add_argument("--batch", type=int, default=1, help="batch size of a random input")
    p.add_argument("--split", type=int, default=None)
    p.add_argument("--dump", default=None, help="directory for STEN1 dumps of predictions and diff maps")
    p.add_argument("--corrupt-overlap", type=int, default=0, help="shrink every border width (negative control)")
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("probe", help="measure invalid border widths of the streamed prefix")
    _common(p)
    p.add_argument("--net", required=True)
    p.add_argument("--tile", type=parse_pair, required=True)
    p.add_argument("--split", type=int, default=None, help="override the file's split index")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("bench", help="time and ledger peak for full and streamed passes")
    _common(p)
    p.add_argument("--net", required=True)
    p.add_argument("--inputs", type=lambda s: [int(v) for v in s.split(",")], default=[1024])
    p.add_argument("--tiles", type=lambda s: [int(v) for v in s.split(",")], default=[0, 527], help="tile sizes; 0 = full pass")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--full-limit-mb", type=float, default=2048, help="skip (only project) full passes above this size")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train-demo", help="streamed vs conventional SGD on synthetic motif images")
    _common(p)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--mode", choices=["stream", "full", "both"], default="both")
    p.add_argument("--images", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--tiles", default="2x2")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("saliency", help="streamed input-gradient saliency map")
    _common(p)
    p.add_argument("--net", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--class", dest="class_index", type=int, default=0)
    p.add_argument("--tiles", default="2x2")
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--split", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_saliency)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    ledger = memory_ledger.AllocationLedger() if args.ledger else None
    try:
        with memory_ledger.tracking(ledger) if ledger is not None else nullcontext():
            code = args.func(args)
    except (SpecError, TileTooSmall, NonContiguousInvalidRegion, ShapeError, DTypeError, PlacementError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SPEC
    except (MemoryError, OSError) as e:
        print(f"resource error: {e}", file=sys.stderr)
        return EXIT_RESOURCE
    if ledger is not None:
        ledger.dump_json(args.ledger)
    return code


if __name__ == "__main__":
    sys.exit(main())
