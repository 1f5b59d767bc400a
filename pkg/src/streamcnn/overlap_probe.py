"""Invalid border widths of a streamed prefix, measured empirically and in closed form.

The probe replaces every kernel of the prefix by an averaging kernel (and every
max-pool by an average pool, biases by zero), pushes a constant tile through it
and looks for cells that fall short of the plateau value. Averaging layers are
separable, so each spatial dimension is probed with an independent 1D pass.

Widths are expressed per layer:

``invalid_forward[l]``
    At the output of layer ``l``: how many cells of the tile's nominal output
    footprint (``ceil(T / J)`` cells, ``J`` the cumulative stride) are missing
    or wrong at the (left, right) side. Valid convolution never produces wrong
    values, so the left width is 0 and the right width counts cells the tile
    cannot compute.

``invalid_backward[l]``
    At the input of layer ``l``: how many cells on each side receive an
    incomplete gradient when the tile's full split-layer gradient is
    backpropagated through the tile alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil
from typing import Sequence

import numpy as np

from .network import LayerSpec, NetworkSpec, SpecError
from .tensor_core import ConvParams, conv_backward_input, conv_forward, dtype_of, relu_forward, valid_extent

EPSILON = {"f64": 1e-6, "f32": 1e-4}

Widths = tuple[tuple[int, int], ...]  # per spatial dim: (left, right)


class TileTooSmall(ValueError):
    pass


class NonContiguousInvalidRegion(RuntimeError):
    pass


@dataclass(frozen=True)
class ProbeReport:
    invalid_forward: tuple[Widths, ...]
    invalid_backward: tuple[Widths, ...]
    output_stride: tuple[int, ...]
    tile_size_probed: tuple[int, ...]
    receptive_field: tuple[int, ...]

    @property
    def overlap(self) -> tuple[int, ...]:
        """Input pixels a tile must share with its neighbour for exact backward (both sides)."""
        return tuple(l + r for l, r in self.invalid_backward[0])

    @property
    def forward_overlap(self) -> tuple[int, ...]:
        """Input pixels neighbouring tiles share in a forward-only pass (negative: gaps are allowed)."""
        return tuple(r - s for r, s in zip(self.receptive_field, self.output_stride))

    def to_json(self) -> dict:
        return {
            "layers": [
                {"invalid_forward": [list(w) for w in f], "invalid_backward": [list(w) for w in b]}
                for f, b in zip(self.invalid_forward, self.invalid_backward)
            ],
            "output_stride": list(self.output_stride),
            "receptive_field": list(self.receptive_field),
            "tile_size": list(self.tile_size_probed),
        }


# -- geometry ----------------------------------------------------------------------


def prefix_geometry(prefix: Sequence[LayerSpec], n: int) -> tuple[list[int], list[int]]:
    """Extents ``N_l`` and cumulative strides ``J_l`` at levels ``0..len(prefix)`` for an input of length ``n``."""
    extents, jumps = [n], [1]
    for layer in prefix:
        k, s = layer.window
        extents.append(valid_extent(extents[-1], k, s))
        jumps.append(jumps[-1] * s)
    return extents, jumps


def receptive_field(prefix: Sequence[LayerSpec]) -> tuple[int, int]:
    """(receptive field, output stride) of one split-layer cell, in input pixels."""
    r, j = 1, 1
    for layer in prefix:
        k, s = layer.window
        r += (k - 1) * j
        j *= s
    return r, j


def _check_prefix(spec: NetworkSpec) -> tuple[LayerSpec, ...]:
    if spec.split < 1 or not spec.prefix:
        raise SpecError("the streamed prefix is empty")
    return spec.prefix


def _tile_dims(tile_size: int | Sequence[int]) -> tuple[int, ...]:
    dims = (int(tile_size),) if isinstance(tile_size, (int, np.integer)) else tuple(int(t) for t in tile_size)
    if not dims or len(dims) > 2 or any(t < 1 for t in dims):
        raise ValueError(f"tile size must be 1 or 2 positive extents, got {tile_size}")
    return dims


def analytic_widths_1d(prefix: Sequence[LayerSpec], t: int) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Closed-form (forward, backward) widths for one dimension and tile extent ``t``."""
    extents, jumps = prefix_geometry(prefix, t)
    if min(extents) < 1:
        raise TileTooSmall(f"tile extent {t} is smaller than the prefix receptive field {receptive_field(prefix)[0]}")
    fwd = [(0, ceil(t / jumps[l + 1]) - extents[l + 1]) for l in range(len(prefix))]
    stride = jumps[-1]
    back = [(0, 0)] * len(prefix)
    lw = rw = 0
    # rel[p] tells whether phase p of the level can carry gradient at all; cells no
    # window touches (k < s) always hold an exact zero and never widen a band
    rel = [True]
    for l in range(len(prefix) - 1, -1, -1):
        k, s = prefix[l].window
        period_in, period_out = stride // jumps[l], len(rel)
        hi = next(q for q in range(lw - 1, lw - 1 - period_out, -1) if rel[q % period_out])
        lo = next(q for q in range(extents[l + 1] - rw, extents[l + 1] - rw + period_out) if rel[q % period_out])
        lw = max(0, hi * s + k)
        rw = max(0, extents[l] - lo * s)
        back[l] = (lw, rw)
        rel = [any(rel[q % period_out] for q in range(-(-(p - k + 1) // s), p // s + 1)) for p in range(period_in)]
    return fwd, back


def analytic_overlap(spec: NetworkSpec, tile_size: int | Sequence[int]) -> ProbeReport:
    prefix = _check_prefix(spec)
    dims = _tile_dims(tile_size)
    r, s = receptive_field(prefix)
    per_dim = [(*analytic_widths_1d(prefix, t), r, s) for t in dims]
    return _assemble(prefix, dims, per_dim)


def _assemble(prefix, dims, per_dim) -> ProbeReport:
    fwd = tuple(tuple(pd[0][l] for pd in per_dim) for l in range(len(prefix)))
    back = tuple(tuple(pd[1][l] for pd in per_dim) for l in range(len(prefix)))
    return ProbeReport(fwd, back, tuple(pd[3] for pd in per_dim), dims, tuple(pd[2] for pd in per_dim))


# -- empirical probe -----------------------------------------------------------------


def _line_status(t: np.ndarray, axis: int, period: int, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Per cell: (relevant, below-max) masks, with the maximum taken per phase class along every axis."""
    cls_max = np.zeros_like(t)
    for phase in np.ndindex(*(period,) * t.ndim):
        sl = tuple(slice(p, None, period) for p in phase)
        block = t[sl]
        if block.size:
            cls_max[sl] = block.max()
    relevant = cls_max > 0
    low = relevant & (t < cls_max * (1 - epsilon))
    return relevant, low


def non_max_indices(t: np.ndarray, epsilon: float, period: int = 1) -> tuple[tuple[int, int], ...]:
    """Per spatial axis of ``t``, (left, right) counts of border lines below the plateau.

    A line (row, column, ...) is invalid when every relevant cell on it is below
    ``max * (1 - epsilon)``. With ``period > 1`` the maximum is taken separately for
    each phase class (cells whose indices agree modulo ``period``), since gradients
    through strided layers form a periodic plateau; classes whose maximum is 0 are
    not relevant and never count as invalid. Invalid cells anywhere between the two
    border bands raise :class:`NonContiguousInvalidRegion`.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise TileTooSmall("empty probe tensor")
    relevant, low = _line_status(t, 0, period, epsilon)
    widths = []
    for axis in range(t.ndim):
        other = tuple(a for a in range(t.ndim) if a != axis)
        has_rel = relevant.any(axis=other) if other else relevant
        rel_cnt = relevant.sum(axis=other) if other else relevant.astype(int)
        low_cnt = low.sum(axis=other) if other else low.astype(int)
        bad = has_rel & (low_cnt == rel_cnt)
        good = has_rel & ~bad
        if not good.any():
            raise TileTooSmall(f"axis {axis}: no cell reaches the plateau")
        first, last = int(np.argmax(good)), len(good) - 1 - int(np.argmax(good[::-1]))
        left_bad = np.flatnonzero(bad[:first])
        right_bad = np.flatnonzero(bad[last + 1 :])
        left = int(left_bad[-1]) + 1 if left_bad.size else 0
        right = len(good) - (last + 1 + int(right_bad[0])) if right_bad.size else 0
        # a phase class with no interior cell has a deficient maximum
        rel_phases = {i % period for i in np.flatnonzero(has_rel)}
        good_phases = {i % period for i in np.flatnonzero(good)}
        if rel_phases - good_phases:
            raise TileTooSmall(f"axis {axis}: valid interior of {last + 1 - first} cells misses a phase of period {period}")
        widths.append((left, right))
    band = np.zeros(t.shape, dtype=bool)
    for axis, (left, right) in enumerate(widths):
        idx = [slice(None)] * t.ndim
        idx[axis] = slice(left, t.shape[axis] - right)
        inner = np.zeros(t.shape, dtype=bool)
        inner[tuple(idx)] = True
        band |= ~inner
    stray = low & ~band
    if stray.any():
        raise NonContiguousInvalidRegion(
            f"{int(stray.sum())} below-plateau cells inside the valid interior, first at {tuple(np.argwhere(stray)[0])}; "
            "a layer is not spatially local or the values are numerically unstable"
        )
    return tuple(widths)


def _surrogate(layer: LayerSpec, dt) -> ConvParams | None:
    if layer.kind in ("conv", "maxpool"):
        k, s = layer.window
        return ConvParams(np.full((1, 1, k), 1.0 / k, dtype=dt), None, s)
    return None


def _surrogate_forward(layer: LayerSpec, p, x):
    return relu_forward(x) if p is None else conv_forward(x, p)


def _surrogate_backward(prefix, params, acts, g, level_cb=None):
    for l in range(len(prefix) - 1, -1, -1):
        if params[l] is not None:
            g = conv_backward_input(g, params[l], acts[l].shape)
        if level_cb is not None:
            level_cb(l, g)
    return g


def probe_1d(prefix: Sequence[LayerSpec], t: int, dtype: str = "f64"):
    """Measured ``(forward widths, backward widths, receptive field, output stride)`` for one dimension."""
    dt = dtype_of(dtype)
    eps = EPSILON[dtype]
    extents, jumps = prefix_geometry(prefix, t)
    if min(extents) < 1:
        raise TileTooSmall(f"tile extent {t} does not fit the prefix")
    stride = jumps[-1]
    params = [_surrogate(layer, dt) for layer in prefix]
    acts = [np.ones((1, 1, t), dtype=dt)]
    for layer, p in zip(prefix, params):
        acts.append(_surrogate_forward(layer, p, acts[-1]))

    # receptive field: span of the input cells reached from a single split-layer cell
    impulse = np.zeros_like(acts[-1])
    impulse[..., extents[-1] // 2] = 1
    reach = np.flatnonzero(_surrogate_backward(prefix, params, acts, impulse)[0, 0])
    r = int(reach[-1] - reach[0] + 1)
    if t < 2 * r:
        # below two receptive fields a phase class may lack a fully interior cell,
        # and its plateau would be read off a border cell
        raise TileTooSmall(f"tile extent {t} is below twice the receptive field {r}; probe a larger tile")

    # forward: embed the tile in a zero canvas so cells the tile cannot compute show up as deficits
    pad = stride * ceil(r / stride)
    x = np.zeros((1, 1, 2 * pad + t), dtype=dt)
    x[..., pad : pad + t] = 1
    fwd = []
    for l, (layer, p) in enumerate(zip(prefix, params)):
        x = _surrogate_forward(layer, p, x)
        j = jumps[l + 1]
        lo = pad // j
        fwd.append(non_max_indices(x[0, 0, lo : lo + ceil(t / j)], eps)[0])

    # backward: ones over the whole split layer, back through the tile alone
    back = [(0, 0)] * len(prefix)

    def record(l, g):
        back[l] = non_max_indices(g[0, 0], eps, period=stride // jumps[l])[0]

    _surrogate_backward(prefix, params, acts, np.ones_like(acts[-1]), record)
    return fwd, back, r, stride


def probe(spec: NetworkSpec, tile_size: int | Sequence[int]) -> ProbeReport:
    """Measure invalid widths of ``spec``'s prefix for a tile of ``tile_size``.

    The network's parameters are never touched: the averaging surrogates are
    built from the layer descriptions alone, so nothing needs restoring.
    """
    prefix = _check_prefix(spec)
    sizes = _tile_dims(tile_size)
    cache: dict[int, tuple] = {}
    for t in sizes:
        if t not in cache:
            cache[t] = probe_1d(prefix, t, spec.dtype)
    return _assemble(prefix, sizes, [cache[t] for t in sizes])


def check_overlap_order(report: ProbeReport) -> bool:
    """Backward needs at least the forward overlap (compared in input pixels)."""
    return all(b >= f for b, f in zip(report.overlap, report.forward_overlap))
