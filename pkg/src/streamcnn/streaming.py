"""Tile planning, streamed forward/backward with checkpointing at the split layer, streamed statistics.

The prefix of the network (layers before the split index) runs tile by tile.
Forward keeps only the concatenated split-layer map. Backward replays each
tile's prefix, backpropagates the tile's slice of the split-layer gradient, and
takes kernel-gradient contributions only from each layer's unique region: the
output cells whose gradient is exact inside this tile and not claimed by an
earlier tile (first tile wins, tiles in row-major order).
"""

from __future__ import annotations

import itertools
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import ceil
from typing import Iterable, Sequence

import numpy as np

from . import memory_ledger
from .memory_ledger import full_pass_peak, nbytes
from .network import (
    ActivationStore,
    GradientSet,
    Network,
    ShapeTrace,
    _check_input,
    layer_input_grad,
    layer_output_shape,
    run_backward,
    run_forward,
    validate,
)
from .overlap_probe import ProbeReport, TileTooSmall, analytic_overlap, prefix_geometry, receptive_field
from .tensor_core import (
    ConsistencyError,
    ConvParams,
    Region,
    ShapeError,
    SpatialCanvas,
    Tensor,
    conv_backward_kernel,
    crop,
    region_size,
)

Interval = tuple[int, int]


class UsageError(RuntimeError):
    pass


# -- planning --------------------------------------------------------------------


@dataclass(frozen=True)
class AxisPlan:
    """Tile layout along one spatial axis.

    ``exact[j][l]`` and ``unique[j][l]`` are global intervals at level ``l``
    (level 0 is the input, level ``l`` the output of prefix layer ``l - 1``).
    """

    extent: int
    tile: int
    starts: tuple[int, ...]
    extents: tuple[int, ...]  # tile-local extent per level
    jumps: tuple[int, ...]
    exact: tuple[tuple[Interval, ...], ...]
    unique: tuple[tuple[Interval, ...], ...]


def effective_tile(n: int, t: int, stride: int) -> int:
    """Largest tile extent ``<= t`` whose far-edge tile still starts on the stride grid."""
    if t >= n:
        return n
    return n - stride * ceil((n - t) / stride)


def _axis_plan(n: int, t: int, report_widths: Sequence[Interval], prefix, levels: Sequence[int], corrupt: int = 0) -> AxisPlan:
    t_eff = effective_tile(n, t, receptive_field(prefix)[1])
    extents, jumps = prefix_geometry(prefix, t_eff)
    g_extents, _ = prefix_geometry(prefix, n)
    depth = len(prefix)
    widths = [tuple(max(0, w - corrupt) for w in report_widths[l]) for l in range(depth)] + [(0, 0)]
    stride = jumps[-1]
    if t_eff == n:
        starts = [0]
    else:
        if min(extents) < 1:
            raise TileTooSmall(f"tile extent {t_eff} does not fit the prefix (receptive field {receptive_field(prefix)[0]})")
        step = min(jumps[l] * (extents[l] - sum(widths[l])) for l in levels)
        step -= step % stride
        if step < stride:
            raise TileTooSmall(
                f"tile extent {t_eff} leaves no exact interior after removing invalid borders; use a larger tile"
            )
        starts = [0]
        while starts[-1] + t_eff < n:
            nxt = starts[-1] + step
            starts.append(min(nxt, n - t_eff))
    last = len(starts) - 1
    exact, unique = [], []
    claimed = [0] * (depth + 1)
    for j, a in enumerate(starts):
        ex, un = [], []
        for l in range(depth + 1):
            o = a // jumps[l]
            lo = o + (widths[l][0] if j > 0 else 0)
            hi = o + extents[l] - (widths[l][1] if j < last else 0)
            ex.append((lo, hi))
            if l in levels:
                if lo > claimed[l]:
                    raise ConsistencyError(f"level {l}: cells [{claimed[l]}, {lo}) are exact in no tile")
                u0 = min(max(lo, claimed[l]), hi)
                un.append((u0, hi))
                claimed[l] = max(claimed[l], hi)
            else:
                un.append((lo, lo))
        exact.append(tuple(ex))
        unique.append(tuple(un))
    for l in levels:
        if claimed[l] != g_extents[l]:
            raise ConsistencyError(f"level {l}: tiles cover {claimed[l]} of {g_extents[l]} cells")
    return AxisPlan(n, t_eff, tuple(starts), tuple(extents), tuple(jumps), tuple(exact), tuple(unique))


@dataclass(frozen=True)
class TilePlan:
    input_size: tuple[int, ...]
    tile_size: tuple[int, ...]
    tile_coordinates: tuple[tuple[int, ...], ...]
    output_regions: tuple[Region, ...]
    overlap: tuple[int, ...]
    output_stride: tuple[int, ...]
    levels: tuple[int, ...]
    axes: tuple[AxisPlan, ...]
    report: ProbeReport | None = None

    @property
    def n_tiles(self) -> int:
        return len(self.tile_coordinates)

    @property
    def grid(self) -> tuple[int, ...]:
        return tuple(len(ax.starts) for ax in self.axes)

    def _index(self, t: int) -> tuple[int, ...]:
        return tuple(np.unravel_index(t, self.grid))

    def input_region(self, t: int) -> Region:
        return tuple((ax.starts[j], ax.starts[j] + ax.tile) for ax, j in zip(self.axes, self._index(t)))

    def origin(self, t: int, level: int) -> tuple[int, ...]:
        return tuple(ax.starts[j] // ax.jumps[level] for ax, j in zip(self.axes, self._index(t)))

    def footprint(self, t: int, level: int) -> Region:
        """Global cells of ``level`` the tile computes."""
        return tuple((o, o + ax.extents[level]) for o, ax in zip(self.origin(t, level), self.axes))

    def exact(self, t: int, level: int) -> Region:
        return tuple(ax.exact[j][level] for ax, j in zip(self.axes, self._index(t)))

    def unique(self, t: int, level: int) -> Region:
        return tuple(ax.unique[j][level] for ax, j in zip(self.axes, self._index(t)))

    def level_shape(self, level: int) -> tuple[int, ...]:
        return tuple(ax.exact[-1][level][1] for ax in self.axes)

    def describe(self) -> str:
        return f"{self.n_tiles} tiles ({'x'.join(map(str, self.grid))}) of {'x'.join(map(str, self.tile_size))}"


def required_levels(split: int, input_grad: bool = False, forward_only: bool = False) -> tuple[int, ...]:
    if forward_only:
        return (split,)
    return tuple(range(0 if input_grad else 1, split + 1))


def plan_tiles(
    net_spec,
    input_size: Sequence[int],
    tile_size: int | Sequence[int],
    report: ProbeReport | None = None,
    *,
    input_grad: bool = False,
    forward_only: bool = False,
    corrupt_overlap: int = 0,
) -> TilePlan:
    """Place tiles greedily along each axis.

    Tiles start on multiples of the output stride; the step is the largest
    stride multiple that keeps the exact regions of neighbouring tiles
    touching at every level the passes need. The last tile on an axis is
    shifted inward to end on the input edge. ``report`` defaults to the closed
    form for the effective tile size; ``corrupt_overlap`` shrinks every width
    (a negative control that must break gradient equivalence).
    """
    prefix = net_spec.prefix
    n_dims = len(input_size)
    sizes = tuple(int(v) for v in input_size)
    tiles = (int(tile_size),) * n_dims if isinstance(tile_size, (int, np.integer)) else tuple(int(v) for v in tile_size)
    if len(tiles) != n_dims:
        raise ShapeError(f"tile size {tiles} does not match input rank {sizes}")
    stride = receptive_field(prefix)[1]
    t_eff = tuple(effective_tile(n, t, stride) for n, t in zip(sizes, tiles))
    if report is None:
        report = analytic_overlap(net_spec, t_eff)
    elif report.tile_size_probed != t_eff:
        raise ValueError(f"report was made for tile {report.tile_size_probed}, plan needs {t_eff}")
    levels = required_levels(net_spec.split, input_grad, forward_only)
    axes = tuple(
        _axis_plan(n, t, [report.invalid_backward[l][d] for l in range(len(prefix))], prefix, levels, corrupt_overlap)
        for d, (n, t) in enumerate(zip(sizes, t_eff))
    )
    coords = tuple(itertools.product(*(ax.starts for ax in axes)))
    split = net_spec.split
    regions = tuple(tuple(ax.unique[j][split] for ax, j in zip(axes, idx)) for idx in itertools.product(*(range(len(ax.starts)) for ax in axes)))
    return TilePlan(sizes, t_eff, coords, regions, report.overlap, report.output_stride, levels, axes, report)


def plan_grid(net_spec, input_size: Sequence[int], grid: int | Sequence[int], **kw) -> TilePlan:
    """Smallest tile size giving at most ``grid`` tiles per axis."""
    sizes = tuple(int(v) for v in input_size)
    grid = (int(grid),) * len(sizes) if isinstance(grid, (int, np.integer)) else tuple(int(g) for g in grid)
    r, stride = receptive_field(net_spec.prefix)
    levels = required_levels(net_spec.split, kw.get("input_grad", False), kw.get("forward_only", False))
    chosen = []
    for n, g in zip(sizes, grid):
        if g <= 1 or n <= r:
            chosen.append(n)
            continue
        for t in range(max(r, ceil(n / g)), n + 1):
            t_eff = effective_tile(n, t, stride)
            try:
                widths = [w[0] for w in analytic_overlap(net_spec, t_eff).invalid_backward]
                ax = _axis_plan(n, t, widths, net_spec.prefix, levels, kw.get("corrupt_overlap", 0))
            except TileTooSmall:
                continue
            if len(ax.starts) <= g:
                chosen.append(t)
                break
        else:
            chosen.append(n)
    return plan_tiles(net_spec, sizes, tuple(chosen), **kw)


# -- unique regions ------------------------------------------------------------------


def crop_unique(filled: np.ndarray, exact: Region) -> Region:
    """Claim the not-yet-filled cells of ``exact`` (global coordinates) and return them.

    Because exact regions are ordered along each axis and tiles are visited in
    row-major order, the unclaimed part is always a box; anything else means
    the plan is inconsistent.
    """
    sl = tuple(slice(a, b) for a, b in exact)
    free = ~filled[sl]
    if not free.any():
        return tuple((a, a) for a, _ in exact)
    box = []
    for axis, (a, _) in enumerate(exact):
        other = tuple(i for i in range(free.ndim) if i != axis)
        idx = np.flatnonzero(free.any(axis=other) if other else free)
        box.append((a + int(idx[0]), a + int(idx[-1]) + 1))
    box = tuple(box)
    bsl = tuple(slice(a, b) for a, b in box)
    if filled[bsl].any():
        raise ConsistencyError(f"unclaimed cells inside {exact} do not form a box")
    filled[bsl] = True
    return box


def crop_relevant_gradient(g: Tensor, plan: TilePlan, t: int, level: int) -> Tensor:
    """The tile's whole footprint of the split-layer gradient, neighbours' cells included as context."""
    return crop(g, plan.footprint(t, level))


def _local(region: Region, origin: Sequence[int]) -> Region:
    return tuple((a - o, b - o) for (a, b), o in zip(region, origin))


# -- execution ----------------------------------------------------------------------


@dataclass
class StreamState:
    checkpoint: Tensor
    tail_store: ActivationStore
    plan: TilePlan
    input_shape: tuple[int, ...]
    filled: list[np.ndarray | None] = field(default_factory=list)
    consumed: bool = False
    _handle: int | None = None


def _split_params(net: Network):
    i = net.spec.split
    return net.spec.prefix, net.params[:i], net.spec.tail, net.params[i:]


def _check_plan(net: Network, x: Tensor, plan: TilePlan) -> ShapeTrace:
    _check_input(net, x)
    trace = validate(net.spec, x.shape)
    if tuple(x.shape[2:]) != plan.input_size:
        raise ShapeError(f"plan was made for input {plan.input_size}, got {x.shape[2:]}")
    return trace


def _map(fn, items, threads: int):
    """``map`` that may run on a thread pool but always yields results in input order."""
    if threads <= 1:
        yield from map(fn, items)
        return
    with ThreadPoolExecutor(threads) as pool:
        yield from pool.map(fn, items)


def stream_prefix_tiles(net: Network, x: Tensor, plan: TilePlan, threads: int = 1) -> Iterable[tuple[int, Tensor, int | None]]:
    """Yield ``(tile index, split-layer tile output, ledger handle)`` in row-major order."""
    prefix, pp, _, _ = _split_params(net)
    led = memory_ledger.current()

    def run(t):
        xt = crop(x, plan.input_region(t))
        h = led.alloc("tile.input", xt)
        out, h_out = run_forward(prefix, pp, xt, keep=False, tag="tile.act")
        led.free(h)
        return t, out, h_out

    return _map(run, range(plan.n_tiles), threads)


def stream_forward(net: Network, x: Tensor, plan: TilePlan, threads: int = 1) -> tuple[Tensor, StreamState]:
    trace = _check_plan(net, x, plan)
    split = net.spec.split
    _, _, tail, tp = _split_params(net)
    led = memory_ledger.current()
    canvas = SpatialCanvas(trace.shapes[split], x.dtype)
    h_ck = led.alloc("stream_o", canvas.data)
    for t, out, h_out in stream_prefix_tiles(net, x, plan, threads):
        region = plan.unique(t, split)
        canvas.place(out, _local(region, plan.origin(t, split)), [a for a, _ in region])
        led.free(h_out)
    stream_o = canvas.finish()
    if tail:
        pred, store = run_forward(tail, tp, stream_o, keep=True, tag="tail.act")
    else:
        pred, store = stream_o, ActivationStore([stream_o], [])
    return pred, StreamState(stream_o, store, plan, tuple(x.shape), _handle=h_ck)


def stream_backward(
    net: Network,
    x: Tensor,
    plan: TilePlan,
    state: StreamState | None,
    loss_grad: Tensor,
    input_grad: bool = False,
    threads: int = 1,
) -> GradientSet:
    if state is None:
        raise UsageError("stream_backward needs the state returned by stream_forward")
    if state.consumed:
        raise UsageError("stream state already consumed by a backward pass")
    if state.plan is not plan or state.input_shape != tuple(x.shape):
        raise UsageError("state was produced for a different input or plan")
    if input_grad and 0 not in plan.levels:
        raise UsageError("plan was made without input_grad=True")
    _check_plan(net, x, plan)
    prefix, pp, tail, tp = _split_params(net)
    split = len(prefix)
    led = memory_ledger.current()

    if tail:
        tail_grads, g, h_g = run_backward(tail, tp, state.tail_store, loss_grad, input_grad=True)
    else:
        if loss_grad.shape != state.checkpoint.shape:
            raise ShapeError(f"loss gradient shape {loss_grad.shape} != prediction shape {state.checkpoint.shape}")
        tail_grads, g, h_g = [], loss_grad, None
    state.consumed = True
    led.free(state._handle)

    # claim unique regions up front so tile work only reads them
    levels = [l for l in plan.levels if l > 0 or input_grad]
    state.filled = [np.zeros(plan.level_shape(l), dtype=bool) if l in levels else None for l in range(split + 1)]
    local_unique = []
    for t in range(plan.n_tiles):
        per_level = {}
        for l in levels:
            box = crop_unique(state.filled[l], plan.exact(t, l))
            if box != plan.unique(t, l) and region_size(box) + region_size(plan.unique(t, l)) > 0:
                raise ConsistencyError(f"tile {t} level {l}: claimed {box}, plan says {plan.unique(t, l)}")
            per_level[l] = _local(box, plan.origin(t, l))
        local_unique.append(per_level)
    for l in levels:
        if not state.filled[l].all():
            raise ConsistencyError(f"level {l}: {int((~state.filled[l]).sum())} cells claimed by no tile")

    acc: list[list[Tensor]] = []
    for l, p in enumerate(pp):
        arrs = [] if not isinstance(p, ConvParams) else [p.kernel] + ([p.bias] if p.bias is not None else [])
        acc.append([np.zeros_like(a) for a in arrs])
        for a in acc[-1]:
            led.alloc(f"grad.param{l}", a)
    canvas = SpatialCanvas(x.shape, x.dtype) if input_grad else None
    if canvas is not None:
        led.alloc("grad.input", canvas.data)  # returned to the caller, stays live

    def tile_backward(t):
        xt = crop(x, plan.input_region(t))
        h_x = led.alloc("tile.input", xt)
        _, store = run_forward(prefix, pp, xt, keep=True, tag="tile.act")
        gt = crop_relevant_gradient(g, plan, t, split)
        h_gt = led.alloc("tile.grad", gt)
        contrib: list[tuple[list[Tensor], list[int | None]]] = [([], [])] * split
        for l in range(split - 1, -1, -1):
            layer, p, xin = prefix[l], pp[l], store.acts[l]
            if isinstance(p, ConvParams):
                box = local_unique[t][l + 1]
                if region_size(box) > 0:
                    k, s = layer.window
                    win = tuple((a * s, (b - 1) * s + k) for a, b in box)
                    dw, db = conv_backward_kernel(crop(xin, win), crop(gt, box), p)
                    parts = [dw] + ([db] if db is not None else [])
                    contrib[l] = (parts, [led.alloc(f"tile.pgrad{l}", a) for a in parts])
            g_in = h_new = None
            if l > 0 or input_grad:
                g_in = layer_input_grad(layer, p, xin, store.aux[l], gt)
                h_new = led.alloc("tile.grad", g_in)
            led.free(h_gt)
            h_act, h_aux = store.handles[l]
            led.free(h_act)
            led.free(h_aux)
            gt, h_gt = g_in, h_new
        store.consumed = True
        led.free(h_x)
        piece = None
        if input_grad:
            box = local_unique[t][0]
            piece = (crop(gt, box), box)
            h_piece = led.alloc("tile.input_grad", piece[0])
            led.free(h_gt)
            h_gt = h_piece
        return t, contrib, piece, h_gt

    for t, contrib, piece, h_piece in _map(tile_backward, range(plan.n_tiles), threads):
        for l, (parts, handles) in enumerate(contrib):
            for a, part, h in zip(acc[l], parts, handles):
                a += part
                led.free(h)
        if piece is not None:
            tile, box = piece
            origin = plan.origin(t, 0)
            canvas.place(tile, tuple((0, b - a) for a, b in box), [a + o for (a, _), o in zip(box, origin)])
        led.free(h_piece)
    led.free(h_g)
    dx = canvas.finish() if canvas is not None else None
    return GradientSet(acc + list(tail_grads), dx)


# -- statistics and saliency -------------------------------------------------------------


@dataclass(frozen=True)
class StreamStats:
    count: int
    sum: np.ndarray
    sumsq: np.ndarray
    clamped: bool = False

    @property
    def mean(self) -> np.ndarray:
        return self.sum / self.count

    @property
    def var(self) -> np.ndarray:
        return np.maximum(self.sumsq / self.count - self.mean**2, 0)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)


def stream_stats(net: Network, inputs: Iterable[Tensor], plan: TilePlan, initial: StreamStats | None = None, threads: int = 1) -> StreamStats:
    """Per-channel mean/std of the split-layer map, accumulated over tiles and inputs.

    Only sums and sums of squares over each tile's unique region are kept;
    pass ``initial`` to continue an earlier accumulation.
    """
    split = net.spec.split
    count, s1, s2 = (0, None, None) if initial is None else (initial.count, initial.sum.copy(), initial.sumsq.copy())
    n_inputs = 0
    for x in inputs:
        n_inputs += 1
        _check_plan(net, x, plan)
        for t, out, h in stream_prefix_tiles(net, x, plan, threads):
            u = crop(out, _local(plan.unique(t, split), plan.origin(t, split)))
            axes = (0,) + tuple(range(2, u.ndim))
            if s1 is None:
                s1 = np.zeros(u.shape[1], dtype=u.dtype)
                s2 = np.zeros(u.shape[1], dtype=u.dtype)
            s1 += u.sum(axis=axes)
            s2 += (u * u).sum(axis=axes)
            count += u.size // u.shape[1]
            memory_ledger.current().free(h)
    if n_inputs == 0 and initial is None:
        raise ValueError("stream_stats needs at least one input")
    raw_var = s2 / count - (s1 / count) ** 2
    clamped = bool((raw_var < 0).any()) or (initial is not None and initial.clamped)
    if clamped:
        warnings.warn("negative variance from cancellation clamped to 0", RuntimeWarning, stacklevel=2)
    return StreamStats(count, s1, s2, clamped)


def saliency(net: Network, x: Tensor, plan: TilePlan, class_index: int, threads: int = 1, percentile: float = 99.0) -> Tensor:
    """Absolute input gradient of one class logit, capped at its percentile and scaled to [0, 1].

    Returns one map per image, shaped like the input's spatial dims (channels
    reduced by maximum).
    """
    pred, state = stream_forward(net, x, plan, threads)
    if pred.ndim != 2 or not 0 <= class_index < pred.shape[1]:
        raise ShapeError(f"class index {class_index} invalid for prediction shape {pred.shape}")
    seed = np.zeros_like(pred)
    seed[:, class_index] = 1
    grads = stream_backward(net, x, plan, state, seed, input_grad=True, threads=threads)
    return normalize_saliency(grads.input, percentile)


def normalize_saliency(dx: Tensor, percentile: float = 99.0) -> Tensor:
    mag = np.abs(dx).max(axis=1)
    out = np.zeros_like(mag)
    for b in range(mag.shape[0]):
        cap = np.percentile(mag[b], percentile)
        if cap > 0:
            out[b] = np.minimum(mag[b], cap) / cap
    return out


# -- memory bound ------------------------------------------------------------------


def _param_shapes(net: Network, lo: int, hi: int) -> list[list[tuple[int, ...]]]:
    return [[a.shape for a in net.param_arrays(l)] for l in range(lo, hi)]


def full_pass_bytes(net: Network, input_shape: Sequence[int]) -> int:
    """Closed-form ledger peak of ``forward_full`` + ``backward_full``."""
    trace = validate(net.spec, input_shape)
    return full_pass_peak(trace, net.dtype, _param_shapes(net, 0, len(net.spec.layers)))


def streamed_peak_bound(net: Network, plan: TilePlan, input_shape: Sequence[int], input_grad: bool = False) -> int:
    """Upper bound on a streamed forward+backward ledger peak.

    One tile's full prefix pass (with its gradient slice and temporary kernel
    contributions) plus the checkpoint, the tail's full pass, the split-layer
    gradient, the parameter accumulators and the input-gradient canvas.
    """
    dt = net.dtype
    split = net.spec.split
    trace = validate(net.spec, input_shape)
    tile_shape = tuple(input_shape[:2]) + plan.tile_size
    shapes = [tile_shape]
    for i, layer in enumerate(net.spec.prefix):
        shapes.append(layer_output_shape(layer, shapes[-1], i))
    tile_trace = ShapeTrace(net.spec.prefix, tuple(shapes))
    prefix_shapes = _param_shapes(net, 0, split)
    params = sum(nbytes(s, dt) for ls in prefix_shapes for s in ls)
    tile = (
        nbytes(tile_shape, dt)
        + full_pass_peak(tile_trace, dt, prefix_shapes)
        + nbytes(tile_trace.shapes[-1], dt)
        + params
        + (nbytes(tile_shape, dt) if input_grad else 0)
    )
    tail_trace = ShapeTrace(net.spec.tail, trace.shapes[split:])
    tail = full_pass_peak(tail_trace, dt, _param_shapes(net, split, len(net.spec.layers))) if net.spec.tail else 0
    split_map = nbytes(trace.shapes[split], dt)
    return tile + 2 * split_map + tail + params + (nbytes(input_shape, dt) if input_grad else 0)
