"""Dense tensor kernels: valid convolution, max-pooling, ReLU, linear, placement.

Tensors are plain numpy arrays laid out row-major as ``(batch, channels, *spatial)``
with one or two spatial dimensions. Only float32 and float64 are accepted, and a
single computation must not mix them.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from math import prod
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray
Region = tuple[tuple[int, int], ...]

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}

# im2col blocks are capped at this many elements so the column buffer stays small.
_CHUNK_ELEMS = 1 << 18


class ShapeError(ValueError):
    """Dimensions of the operands do not compose."""


class DTypeError(TypeError):
    """Unsupported dtype, or float32 and float64 mixed in one computation."""


class PlacementError(ValueError):
    """Tiles placed into a destination overlap or leave holes."""


class ConsistencyError(RuntimeError):
    """Internal bookkeeping disagrees with itself (bad argmax, bad plan, ...)."""


def dtype_of(name: str | np.dtype) -> np.dtype:
    if isinstance(name, str) and name in DTYPES:
        return DTYPES[name]
    dt = np.dtype(name)
    if dt not in DTYPES.values():
        raise DTypeError(f"unsupported dtype {dt}; use f32 or f64")
    return dt


def dtype_name(dt: np.dtype) -> str:
    for k, v in DTYPES.items():
        if v == dt:
            return k
    raise DTypeError(f"unsupported dtype {dt}")


def check_tensor(t: Tensor, name: str = "tensor") -> None:
    if not isinstance(t, np.ndarray):
        raise TypeError(f"{name} must be a numpy array, got {type(t).__name__}")
    if t.dtype not in DTYPES.values():
        raise DTypeError(f"{name} has dtype {t.dtype}; use f32 or f64")
    if any(s < 1 for s in t.shape):
        raise ShapeError(f"{name} has an empty dimension: {t.shape}")


def same_dtype(*tensors: Tensor | None) -> np.dtype:
    dts = {t.dtype for t in tensors if t is not None}
    if len(dts) != 1:
        raise DTypeError(f"mixed dtypes in one computation: {sorted(map(str, dts))}")
    return dts.pop()


def _ntuple(v: int | Sequence[int], n: int, name: str) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        out = (int(v),) * n
    else:
        out = tuple(int(x) for x in v)
        if len(out) != n:
            raise ShapeError(f"{name} has {len(out)} entries, expected {n}")
    if any(x < 1 for x in out):
        raise ShapeError(f"{name} must be positive, got {out}")
    return out


def valid_extent(n: int, k: int, s: int) -> int:
    """Output length of a valid window op; 0 when the window does not fit."""
    return (n - k) // s + 1 if n >= k else 0


@dataclass(frozen=True)
class ConvParams:
    kernel: Tensor
    bias: Tensor | None = None
    stride: int | tuple[int, ...] = 1
    padding_mode: str = "valid"

    def __post_init__(self):
        check_tensor(self.kernel, "kernel")
        if self.kernel.ndim not in (3, 4):
            raise ShapeError(f"kernel must be (out, in, *k) with 1 or 2 spatial dims, got {self.kernel.shape}")
        if self.padding_mode != "valid":
            raise ValueError("only valid convolution is supported; pad the full image once instead")
        if self.bias is not None:
            check_tensor(self.bias, "bias")
            if self.bias.shape != (self.kernel.shape[0],):
                raise ShapeError(f"bias shape {self.bias.shape} != ({self.kernel.shape[0]},)")
            same_dtype(self.kernel, self.bias)
        object.__setattr__(self, "stride", _ntuple(self.stride, self.kernel.ndim - 2, "stride"))

    @property
    def ksize(self) -> tuple[int, ...]:
        return self.kernel.shape[2:]


def _check_conv_input(x: Tensor, params: ConvParams) -> tuple[int, ...]:
    check_tensor(x, "input")
    d = params.kernel.ndim - 2
    if x.ndim != d + 2:
        raise ShapeError(f"input rank {x.ndim} does not match a {d}D kernel")
    if x.shape[1] != params.kernel.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {params.kernel.shape[1]}")
    same_dtype(x, params.kernel, params.bias)
    out = []
    for dim, (n, k, s) in enumerate(zip(x.shape[2:], params.ksize, params.stride)):
        if n < k:
            raise ShapeError(f"spatial dim {dim}: input extent {n} < kernel extent {k}")
        out.append(valid_extent(n, k, s))
    return tuple(out)


def _windows(x: Tensor, k: Sequence[int], s: Sequence[int]) -> np.ndarray:
    """Strided view ``(B, C, *out_spatial, *k)`` of all valid windows."""
    d = len(k)
    v = sliding_window_view(x, tuple(k), axis=tuple(range(2, 2 + d)))
    return v[(slice(None), slice(None)) + tuple(slice(None, None, si) for si in s)]


def _column_blocks(x: Tensor, k: Sequence[int], s: Sequence[int]):
    """Yield ``(b, r0, r1, cols)`` with cols of shape ``(C*K, rows*rest)``.

    Blocks split the first output spatial dim so each column buffer holds at
    most ``_CHUNK_ELEMS`` elements.
    """
    d = len(k)
    v = _windows(x, k, s)
    out_sp = v.shape[2 : 2 + d]
    ck = x.shape[1] * prod(k)
    rows = max(1, _CHUNK_ELEMS // max(1, ck * prod(out_sp[1:])))
    perm = (0, *range(d + 1, 2 * d + 1), *range(1, d + 1))
    for b in range(x.shape[0]):
        for r0 in range(0, out_sp[0], rows):
            r1 = min(out_sp[0], r0 + rows)
            blk = v[b, :, r0:r1].transpose(perm)
            yield b, r0, r1, blk.reshape(ck, -1)


def conv_forward(x: Tensor, params: ConvParams) -> Tensor:
    """Valid cross-correlation ``out[o, q] = sum_{c, j} w[o, c, j] * x[c, q*s + j] (+ bias)``."""
    out_sp = _check_conv_input(x, params)
    w = params.kernel
    o = w.shape[0]
    wm = w.reshape(o, -1)
    out = np.empty((x.shape[0], o, *out_sp), dtype=x.dtype)
    for b, r0, r1, cols in _column_blocks(x, params.ksize, params.stride):
        out[b, :, r0:r1] = (wm @ cols).reshape(o, r1 - r0, *out_sp[1:])
    if params.bias is not None:
        out += params.bias.reshape((1, o) + (1,) * len(out_sp))
    return out


def conv_backward_kernel(x: Tensor, grad_output: Tensor, params: ConvParams) -> tuple[Tensor, Tensor | None]:
    """Kernel (and bias) gradient: ``dw[o, c, j] = sum_q g[o, q] * x[c, q*s + j]``."""
    out_sp = _check_conv_input(x, params)
    check_tensor(grad_output, "grad_output")
    expect = (x.shape[0], params.kernel.shape[0], *out_sp)
    if grad_output.shape != expect:
        raise ShapeError(f"grad_output shape {grad_output.shape} != conv output shape {expect}")
    same_dtype(x, grad_output)
    o = params.kernel.shape[0]
    dw = np.zeros((o, x.shape[1] * prod(params.ksize)), dtype=x.dtype)
    for b, r0, r1, cols in _column_blocks(x, params.ksize, params.stride):
        dw += grad_output[b, :, r0:r1].reshape(o, -1) @ cols.T
    db = None
    if params.bias is not None:
        db = grad_output.sum(axis=(0, *range(2, grad_output.ndim)))
    return dw.reshape(params.kernel.shape), db


def conv_backward_input(grad_output: Tensor, params: ConvParams, input_shape: Sequence[int]) -> Tensor:
    """Input gradient as a full convolution with the flipped kernel.

    The output gradient is dilated by ``stride - 1`` zeros between elements and
    padded with ``k - 1`` zeros per side; a valid correlation with the flipped,
    in/out-transposed kernel then yields the input gradient. Input positions
    past the last window (when ``(n - k) % s != 0``) receive zero.
    """
    check_tensor(grad_output, "grad_output")
    input_shape = tuple(int(v) for v in input_shape)
    w = params.kernel
    d = w.ndim - 2
    if len(input_shape) != d + 2 or input_shape[1] != w.shape[1]:
        raise ShapeError(f"input_shape {input_shape} incompatible with kernel {w.shape}")
    out_sp = tuple(valid_extent(n, k, s) for n, k, s in zip(input_shape[2:], params.ksize, params.stride))
    expect = (input_shape[0], w.shape[0], *out_sp)
    if grad_output.shape != expect:
        raise ShapeError(f"grad_output shape {grad_output.shape} != conv output shape {expect}")
    same_dtype(grad_output, w)

    dil_sp = tuple((n - 1) * s + 1 for n, s in zip(out_sp, params.stride))
    if all(s == 1 for s in params.stride):
        dil = grad_output
    else:
        dil = np.zeros(grad_output.shape[:2] + dil_sp, dtype=grad_output.dtype)
        dil[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in params.stride)] = grad_output
    pad = [(0, 0), (0, 0)] + [(k - 1, k - 1) for k in params.ksize]
    padded = np.pad(dil, pad)
    flipped = np.ascontiguousarray(np.flip(w, axis=tuple(range(2, 2 + d))).swapaxes(0, 1))
    core = conv_forward(padded, ConvParams(flipped))
    if core.shape == input_shape:
        return core
    dx = np.zeros(input_shape, dtype=grad_output.dtype)
    dx[(slice(None), slice(None)) + tuple(slice(0, n) for n in core.shape[2:])] = core
    return dx


def maxpool_forward(x: Tensor, window: int | Sequence[int], stride: int | Sequence[int]) -> tuple[Tensor, np.ndarray]:
    """Windowed maximum plus the flat input index of each winner.

    Ties go to the lowest flat index: offsets are scanned in row-major order and
    only a strictly larger value replaces the running maximum.
    """
    check_tensor(x, "input")
    d = x.ndim - 2
    if d not in (1, 2):
        raise ShapeError(f"max-pool needs 1 or 2 spatial dims, got shape {x.shape}")
    k = _ntuple(window, d, "window")
    s = _ntuple(stride, d, "stride")
    for dim, (n, kk) in enumerate(zip(x.shape[2:], k)):
        if kk > n:
            raise ShapeError(f"spatial dim {dim}: window {kk} larger than input extent {n}")
    v = _windows(x, k, s)
    iv = _windows(np.arange(x.size, dtype=np.int64).reshape(x.shape), k, s)
    first = (Ellipsis,) + (0,) * d
    best = v[first].copy()
    arg = iv[first].copy()
    for off in itertools.product(*(range(kk) for kk in k)):
        if not any(off):
            continue
        idx = (Ellipsis,) + off
        cand = v[idx]
        take = cand > best
        np.copyto(best, cand, where=take)
        np.copyto(arg, iv[idx], where=take)
    return best, arg


def maxpool_backward(grad_output: Tensor, argmax: np.ndarray, input_shape: Sequence[int]) -> Tensor:
    """Scatter-add of the output gradient onto the recorded argmax positions."""
    check_tensor(grad_output, "grad_output")
    input_shape = tuple(int(v) for v in input_shape)
    if argmax.shape != grad_output.shape:
        raise ShapeError(f"argmax shape {argmax.shape} != grad_output shape {grad_output.shape}")
    size = prod(input_shape)
    if argmax.size and (argmax.min() < 0 or argmax.max() >= size):
        raise ConsistencyError(f"argmax index outside input of shape {input_shape}")
    dx = np.bincount(argmax.ravel(), weights=grad_output.ravel(), minlength=size)
    return dx.astype(grad_output.dtype, copy=False).reshape(input_shape)


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(grad_output: Tensor, x: Tensor) -> Tensor:
    if grad_output.shape != x.shape:
        raise ShapeError(f"grad shape {grad_output.shape} != input shape {x.shape}")
    return np.where(x > 0, grad_output, 0).astype(grad_output.dtype, copy=False)


def linear_forward(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` on a batch-major input; extra dims are flattened."""
    check_tensor(x, "input")
    same_dtype(x, weight, bias)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects {weight.shape[1]} features, got {flat.shape[1]}")
    y = flat @ weight.T
    if bias is not None:
        y += bias
    return y


def linear_backward(x: Tensor, grad_output: Tensor, weight: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(dx, dweight, dbias)``; dx has the (unflattened) input shape."""
    flat = x.reshape(x.shape[0], -1)
    if grad_output.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"grad shape {grad_output.shape} != {(x.shape[0], weight.shape[0])}")
    dx = (grad_output @ weight).reshape(x.shape)
    return dx, grad_output.T @ flat, grad_output.sum(axis=0)


# -- placement -----------------------------------------------------------------


def _region_slices(region: Region) -> tuple[slice, ...]:
    return (slice(None), slice(None)) + tuple(slice(a, b) for a, b in region)


def crop(t: Tensor, region: Region) -> Tensor:
    """Contiguous copy of a spatial region ``((start, stop), ...)``."""
    if len(region) != t.ndim - 2:
        raise ShapeError(f"region rank {len(region)} != spatial rank {t.ndim - 2}")
    for dim, ((a, b), n) in enumerate(zip(region, t.shape[2:])):
        if not 0 <= a <= b <= n:
            raise ShapeError(f"spatial dim {dim}: region [{a}, {b}) outside extent {n}")
    return np.ascontiguousarray(t[_region_slices(region)])


def region_size(region: Region) -> int:
    return prod(max(0, b - a) for a, b in region)


@dataclass
class SpatialCanvas:
    """Destination for tile placement that refuses double writes and holes."""

    shape: tuple[int, ...]
    dtype: np.dtype
    data: Tensor = field(init=False)
    written: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.shape = tuple(self.shape)
        self.data = np.zeros(self.shape, dtype=self.dtype)
        self.written = np.zeros(self.shape[2:], dtype=bool)

    def place(self, tile: Tensor, src: Region, dst: Sequence[int]) -> None:
        if tile.shape[:2] != self.shape[:2]:
            raise ShapeError(f"tile batch/channels {tile.shape[:2]} != canvas {self.shape[:2]}")
        same_dtype(tile, self.data)
        dst_region = tuple((o, o + (b - a)) for o, (a, b) in zip(dst, src))
        for dim, ((a, b), n) in enumerate(zip(dst_region, self.shape[2:])):
            if a < 0 or b > n:
                raise PlacementError(f"spatial dim {dim}: placement [{a}, {b}) outside extent {n}")
        mask = self.written[tuple(slice(a, b) for a, b in dst_region)]
        if mask.any():
            raise PlacementError(f"region {dst_region} overlaps an earlier placement")
        mask[...] = True
        self.data[_region_slices(dst_region)] = tile[_region_slices(src)]

    def finish(self) -> Tensor:
        if not self.written.all():
            missing = np.argwhere(~self.written)
            raise PlacementError(f"{len(missing)} positions never written, first at {tuple(missing[0])}")
        return self.data


def concat_spatial(
    tiles: Sequence[Tensor],
    placements: Sequence[tuple[Region, Sequence[int]]],
    shape: Sequence[int] | None = None,
) -> Tensor:
    """Assemble tile sub-regions into one tensor.

    ``placements[i] = (src_region_in_tile, dst_offset)``. When ``shape`` is not
    given the spatial extent is the bounding box of all placements.
    """
    if len(tiles) != len(placements) or not tiles:
        raise PlacementError("need one placement per tile and at least one tile")
    if shape is None:
        d = tiles[0].ndim - 2
        ext = [0] * d
        for src, dst in placements:
            for i in range(d):
                ext[i] = max(ext[i], dst[i] + src[i][1] - src[i][0])
        shape = tiles[0].shape[:2] + tuple(ext)
    canvas = SpatialCanvas(tuple(shape), same_dtype(*tiles))
    for t, (src, dst) in zip(tiles, placements):
        canvas.place(t, src, dst)
    return canvas.finish()


# -- STEN1 tensor files ----------------------------------------------------------

_MAGIC = b"STEN1"
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_tensor(path: str | Path, t: Tensor) -> None:
    """Write ``STEN1 | u8 dtype | u8 rank | u32 dims... | raw little-endian data``."""
    t = np.asarray(t)
    if t.dtype not in _TAGS:
        raise DTypeError(f"cannot store dtype {t.dtype}")
    header = _MAGIC + struct.pack("<BB", _TAGS[t.dtype], t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    le = t.astype(t.dtype.newbyteorder("<"), copy=False)
    Path(path).write_bytes(header + np.ascontiguousarray(le).tobytes())


def load_tensor(path: str | Path) -> Tensor:
    raw = Path(path).read_bytes()
    if raw[:5] != _MAGIC:
        raise ValueError(f"{path}: not a STEN1 file")
    tag, rank = struct.unpack_from("<BB", raw, 5)
    if tag not in (0, 1):
        raise DTypeError(f"{path}: unknown dtype tag {tag}")
    dims = struct.unpack_from(f"<{rank}I", raw, 7)
    dt = np.dtype("<f4" if tag == 0 else "<f8")
    off = 7 + 4 * rank
    n = prod(dims)
    if len(raw) - off != n * dt.itemsize:
        raise ValueError(f"{path}: payload has {len(raw) - off} bytes, expected {n * dt.itemsize}")
    data = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(dims)
    return data.astype(dt.newbyteorder("="))


def max_abs_diff(a: Iterable[Tensor | None], b: Iterable[Tensor | None]) -> float:
    worst = 0.0
    for x, y in zip(a, b):
        if x is None and y is None:
            continue
        worst = max(worst, float(np.max(np.abs(np.asarray(x, np.float64) - np.asarray(y, np.float64)))))
    return worst
