"""Sequential network description, validation and the conventional (non-tiled) executor.

The conventional executor keeps every activation alive; it is the reference the
streaming engine is checked against and the memory baseline it is compared to.

Network file format, one layer per line::

    split=<i> dtype=<f32|f64>
    conv out=<c> k=<n> stride=<s> [bias]
    maxpool k=<n> stride=<s>
    relu
    flatten
    linear out=<c>

``#`` starts a comment. ``linear`` flattens its input and always has a bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import prod
from pathlib import Path
from typing import Sequence

import numpy as np

from . import memory_ledger
from .tensor_core import (
    ConvParams,
    DTypeError,
    ShapeError,
    Tensor,
    check_tensor,
    conv_backward_input,
    conv_backward_kernel,
    conv_forward,
    dtype_name,
    dtype_of,
    linear_backward,
    linear_forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    valid_extent,
)

KINDS = ("conv", "maxpool", "relu", "flatten", "linear")
LOCAL_KINDS = frozenset({"conv", "maxpool", "relu"})
_NORM_KINDS = {"batchnorm", "bn", "layernorm", "groupnorm", "instancenorm"}


class SpecError(ValueError):
    """Malformed or inconsistent network description."""


class ParseError(SpecError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class NonLocalLayerInPrefix(SpecError):
    pass


class ShapeUnderflow(SpecError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int | None = None
    k: int = 1
    stride: int = 1
    bias: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "linear") and (self.out is None or self.out < 1):
            raise SpecError(f"{self.kind} needs out >= 1")
        if self.k < 1 or self.stride < 1:
            raise SpecError(f"{self.kind}: k and stride must be >= 1")

    @property
    def is_local(self) -> bool:
        return self.kind in LOCAL_KINDS

    @property
    def window(self) -> tuple[int, int]:
        """(kernel extent, stride) of the layer's spatial footprint."""
        if self.kind in ("conv", "maxpool"):
            return self.k, self.stride
        return 1, 1


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    split: int
    dtype: str = "f64"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        dtype_of(self.dtype)
        if not 0 < self.split <= len(self.layers):
            raise SpecError(f"split={self.split} must satisfy 0 < split <= {len(self.layers)}")
        for i, layer in enumerate(self.layers[: self.split]):
            if not layer.is_local:
                raise NonLocalLayerInPrefix(
                    f"layer {i} ({layer.kind}) needs the whole feature map and cannot be streamed; "
                    f"move split to <= {i}"
                )

    @property
    def prefix(self) -> tuple[LayerSpec, ...]:
        return self.layers[: self.split]

    @property
    def tail(self) -> tuple[LayerSpec, ...]:
        return self.layers[self.split :]

    def with_dtype(self, dtype: str) -> "NetworkSpec":
        return replace(self, dtype=dtype)


# -- text format -------------------------------------------------------------------


def parse_spec(text: str) -> NetworkSpec:
    header: dict[str, str] | None = None
    layers: list[LayerSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        if header is None:
            if not words[0].startswith("split="):
                raise ParseError(lineno, "expected header 'split=<i> dtype=<f32|f64>'")
            header = _keyvals(words, lineno, {"split", "dtype"})
            continue
        kind, args = words[0].lower(), words[1:]
        if kind in _NORM_KINDS:
            raise ParseError(lineno, f"normalization layer {kind!r} is not supported")
        if kind not in KINDS:
            raise ParseError(lineno, f"unknown layer kind {kind!r}")
        flags = {a for a in args if "=" not in a}
        kv = _keyvals([a for a in args if "=" in a], lineno, {"out", "k", "stride"})
        allowed_flags = {"bias"} if kind == "conv" else set()
        if flags - allowed_flags:
            raise ParseError(lineno, f"unexpected token(s) {sorted(flags - allowed_flags)} for {kind}")
        try:
            ints = {k: int(v) for k, v in kv.items()}
            if kind == "conv":
                layer = LayerSpec("conv", out=ints["out"], k=ints["k"], stride=ints.get("stride", 1), bias="bias" in flags)
            elif kind == "maxpool":
                layer = LayerSpec("maxpool", k=ints["k"], stride=ints.get("stride", ints["k"]))
            elif kind == "linear":
                layer = LayerSpec("linear", out=ints["out"], bias=True)
            else:
                if kv:
                    raise ParseError(lineno, f"{kind} takes no parameters")
                layer = LayerSpec(kind)
        except KeyError as e:
            raise ParseError(lineno, f"{kind} is missing {e.args[0]}=") from None
        except ValueError as e:
            if isinstance(e, ParseError):
                raise
            raise ParseError(lineno, str(e)) from None
        layers.append(layer)
    if header is None:
        raise ParseError(0, "empty network file")
    try:
        return NetworkSpec(tuple(layers), int(header["split"]), header.get("dtype", "f64"))
    except (KeyError, ValueError, TypeError) as e:
        if isinstance(e, SpecError):
            raise
        raise SpecError(f"bad header: {e}") from None


def _keyvals(words: Sequence[str], lineno: int, allowed: set[str]) -> dict[str, str]:
    out = {}
    for w in words:
        if "=" not in w:
            raise ParseError(lineno, f"expected key=value, got {w!r}")
        k, v = w.split("=", 1)
        if k not in allowed:
            raise ParseError(lineno, f"unknown key {k!r}")
        out[k] = v
    return out


def emit_spec(spec: NetworkSpec) -> str:
    lines = [f"split={spec.split} dtype={spec.dtype}"]
    for layer in spec.layers:
        if layer.kind == "conv":
            lines.append(f"conv out={layer.out} k={layer.k} stride={layer.stride}" + (" bias" if layer.bias else ""))
        elif layer.kind == "maxpool":
            lines.append(f"maxpool k={layer.k} stride={layer.stride}")
        elif layer.kind == "linear":
            lines.append(f"linear out={layer.out}")
        else:
            lines.append(layer.kind)
    return "\n".join(lines) + "\n"


def load_spec(path: str | Path) -> NetworkSpec:
    return parse_spec(Path(path).read_text())


def bundled_spec(name: str) -> NetworkSpec:
    """Load one of the network files shipped in ``streamcnn/nets``."""
    return load_spec(Path(__file__).parent / "nets" / f"{name}.net")


# -- shapes --------------------------------------------------------------------------


@dataclass(frozen=True)
class ShapeTrace:
    layers: tuple[LayerSpec, ...]
    shapes: tuple[tuple[int, ...], ...]  # shapes[0] is the input, shapes[l + 1] the output of layer l


def layer_output_shape(layer: LayerSpec, shape: tuple[int, ...], index: int = 0) -> tuple[int, ...]:
    if layer.kind in ("conv", "maxpool"):
        if len(shape) < 3:
            raise ShapeError(f"layer {index} ({layer.kind}) needs a spatial input, got {shape}")
        sp = []
        for n in shape[2:]:
            if n < layer.k:
                raise ShapeUnderflow(f"layer {index} ({layer.kind} k={layer.k}): input extent {n} < kernel extent")
            sp.append(valid_extent(n, layer.k, layer.stride))
        ch = layer.out if layer.kind == "conv" else shape[1]
        return (shape[0], ch, *sp)
    if layer.kind == "relu":
        return shape
    if layer.kind == "flatten":
        return (shape[0], prod(shape[1:]))
    return (shape[0], layer.out)


def validate(spec: NetworkSpec, input_shape: Sequence[int]) -> ShapeTrace:
    """Check that the layers compose for ``input_shape = (B, C, *spatial)``."""
    shape = tuple(int(v) for v in input_shape)
    if len(shape) not in (3, 4) or any(v < 1 for v in shape):
        raise ShapeError(f"input shape must be (B, C, W) or (B, C, H, W) with positive entries, got {shape}")
    shapes = [shape]
    for i, layer in enumerate(spec.layers):
        if layer.kind in ("conv", "maxpool") and len(shape) < 3:
            raise SpecError(f"layer {i} ({layer.kind}) follows a flattening layer")
        shape = layer_output_shape(layer, shape, i)
        shapes.append(shape)
    return ShapeTrace(spec.layers, tuple(shapes))


# -- parameters ------------------------------------------------------------------


@dataclass(frozen=True)
class LinearParams:
    weight: Tensor
    bias: Tensor


@dataclass(frozen=True)
class Network:
    """A network description together with concrete parameters."""

    spec: NetworkSpec
    params: tuple[ConvParams | LinearParams | None, ...]
    input_channels: int

    @property
    def dtype(self) -> np.dtype:
        return dtype_of(self.spec.dtype)

    def param_arrays(self, l: int) -> list[Tensor]:
        p = self.params[l]
        if isinstance(p, ConvParams):
            return [p.kernel] + ([p.bias] if p.bias is not None else [])
        if isinstance(p, LinearParams):
            return [p.weight, p.bias]
        return []

    def astype(self, dtype: str) -> "Network":
        dt = dtype_of(dtype)
        params = []
        for p in self.params:
            if isinstance(p, ConvParams):
                p = ConvParams(p.kernel.astype(dt), None if p.bias is None else p.bias.astype(dt), p.stride)
            elif isinstance(p, LinearParams):
                p = LinearParams(p.weight.astype(dt), p.bias.astype(dt))
            params.append(p)
        return Network(self.spec.with_dtype(dtype), tuple(params), self.input_channels)


def init_network(spec: NetworkSpec, input_shape: Sequence[int], seed: int = 0, bias_scale: float = 0.1) -> Network:
    """He-normal kernels, uniform(-bias_scale, bias_scale) biases, drawn in float64 then cast."""
    trace = validate(spec, input_shape)
    rng = np.random.default_rng(seed)
    dt = dtype_of(spec.dtype)
    params: list = []
    for layer, shape in zip(spec.layers, trace.shapes[:-1]):
        d = len(shape) - 2
        if layer.kind == "conv":
            fan_in = shape[1] * layer.k**d
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (layer.out, shape[1]) + (layer.k,) * d)
            b = rng.uniform(-bias_scale, bias_scale, layer.out) if layer.bias else None
            params.append(ConvParams(w.astype(dt), None if b is None else b.astype(dt), layer.stride))
        elif layer.kind == "linear":
            fan_in = prod(shape[1:])
            w = rng.normal(0.0, np.sqrt(1.0 / fan_in), (layer.out, fan_in))
            b = rng.uniform(-bias_scale, bias_scale, layer.out)
            params.append(LinearParams(w.astype(dt), b.astype(dt)))
        else:
            params.append(None)
    return Network(spec, tuple(params), int(input_shape[1]))


# -- per-layer primitives ------------------------------------------------------------


def layer_forward(layer: LayerSpec, p, x: Tensor) -> tuple[Tensor, np.ndarray | None]:
    """Forward one layer; returns the output and the max-pool argmax map (else None)."""
    if layer.kind == "conv":
        return conv_forward(x, p), None
    if layer.kind == "maxpool":
        return maxpool_forward(x, layer.k, layer.stride)
    if layer.kind == "relu":
        return relu_forward(x), None
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1).copy(), None
    return linear_forward(x, p.weight, p.bias), None


def layer_param_grads(layer: LayerSpec, p, x: Tensor, g: Tensor) -> list[Tensor]:
    if layer.kind == "conv":
        dw, db = conv_backward_kernel(x, g, p)
        return [dw] + ([db] if db is not None else [])
    if layer.kind == "linear":
        _, dw, db = linear_backward(x, g, p.weight)
        return [dw, db]
    return []


def layer_input_grad(layer: LayerSpec, p, x: Tensor, aux, g: Tensor) -> Tensor:
    if layer.kind == "conv":
        return conv_backward_input(g, p, x.shape)
    if layer.kind == "maxpool":
        return maxpool_backward(g, aux, x.shape)
    if layer.kind == "relu":
        return relu_backward(g, x)
    if layer.kind == "flatten":
        return g.reshape(x.shape).copy()
    return (g @ p.weight).reshape(x.shape)


# -- sequential executor ---------------------------------------------------------


@dataclass
class ActivationStore:
    """Inputs of every executed layer (``acts[0]`` is caller-owned) plus argmax maps."""

    acts: list[Tensor]
    aux: list[np.ndarray | None]
    handles: list[tuple[int | None, int | None]] = field(default_factory=list)
    consumed: bool = False

    @property
    def output(self) -> Tensor:
        return self.acts[-1]


@dataclass
class GradientSet:
    """Per-layer parameter gradients (same order as ``Network.param_arrays``) and optional input gradient."""

    params: list[list[Tensor]]
    input: Tensor | None = None

    def flat(self) -> list[Tensor]:
        return [g for layer in self.params for g in layer]


def run_forward(layers: Sequence[LayerSpec], params: Sequence, x: Tensor, keep: bool = True, tag: str = "act"):
    """Run ``layers`` on ``x``.

    With ``keep=True`` every output and argmax map stays alive in the returned
    :class:`ActivationStore`. With ``keep=False`` each intermediate is released
    as soon as the next one exists and only the final output is returned.
    """
    led = memory_ledger.current()
    if not keep:
        h_prev = None
        for i, (layer, p) in enumerate(zip(layers, params)):
            y, _ = layer_forward(layer, p, x)
            h = led.alloc(f"{tag}{i + 1}", y)
            led.free(h_prev)
            x, h_prev = y, h
        return x, h_prev
    store = ActivationStore([x], [])
    for i, (layer, p) in enumerate(zip(layers, params)):
        y, aux = layer_forward(layer, p, x)
        store.handles.append((led.alloc(f"{tag}{i + 1}", y), None if aux is None else led.alloc(f"argmax{i + 1}", aux)))
        store.acts.append(y)
        store.aux.append(aux)
        x = y
    return x, store


def run_backward(
    layers: Sequence[LayerSpec], params: Sequence, store: ActivationStore, grad: Tensor, input_grad: bool = True
) -> tuple[list[list[Tensor]], Tensor | None, int | None]:
    """Backpropagate ``grad`` (gradient at the store's output) through ``layers``.

    Consumes the store: each layer's output is released once its gradient has
    been propagated. Returns ``(param grads, input grad, ledger handle of input grad)``.
    """
    if store.consumed:
        raise RuntimeError("activation store already consumed by a backward pass")
    if grad.shape != store.output.shape:
        raise ShapeError(f"loss gradient shape {grad.shape} != prediction shape {store.output.shape}")
    led = memory_ledger.current()
    store.consumed = True
    n = len(layers)
    pgrads: list[list[Tensor]] = [[] for _ in range(n)]
    g, h_g = grad, None
    for l in range(n - 1, -1, -1):
        layer, p, x = layers[l], params[l], store.acts[l]
        pgrads[l] = layer_param_grads(layer, p, x, g)
        for t in pgrads[l]:
            led.alloc(f"grad.param{l}", t)
        g_in, h_in = None, None
        if l > 0 or input_grad:
            g_in = layer_input_grad(layer, p, x, store.aux[l], g)
            h_in = led.alloc(f"grad.act{l}", g_in)
        led.free(h_g)
        h_act, h_aux = store.handles[l]
        led.free(h_act)
        led.free(h_aux)
        g, h_g = g_in, h_in
    store.acts[1:] = []
    return pgrads, g, h_g


def _check_input(net: Network, x: Tensor) -> None:
    check_tensor(x, "input")
    if x.dtype != net.dtype:
        raise DTypeError(f"input dtype {x.dtype} != network dtype {net.dtype}")
    if x.shape[1] != net.input_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, network expects {net.input_channels}")


def forward_full(net: Network, x: Tensor) -> tuple[Tensor, ActivationStore]:
    _check_input(net, x)
    validate(net.spec, x.shape)
    return run_forward(net.spec.layers, net.params, x, keep=True)


def backward_full(net: Network, store: ActivationStore, loss_grad: Tensor) -> GradientSet:
    pgrads, dx, _ = run_backward(net.spec.layers, net.params, store, loss_grad, input_grad=True)
    return GradientSet(pgrads, dx)


# -- losses and optimizer -------------------------------------------------------------


def sum_loss(pred: Tensor) -> tuple[float, Tensor]:
    """Sum of all outputs; the gradient is all ones."""
    return float(pred.sum()), np.ones_like(pred)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean softmax cross-entropy over the batch for integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -float(logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1
    return loss, (grad / b).astype(logits.dtype)


def sgd_step(net: Network, grads: GradientSet, lr: float) -> Network:
    params = []
    for p, g in zip(net.params, grads.params):
        if isinstance(p, ConvParams):
            k = p.kernel - lr * g[0]
            b = None if p.bias is None else p.bias - lr * g[1]
            p = ConvParams(k.astype(p.kernel.dtype), None if b is None else b.astype(p.kernel.dtype), p.stride)
        elif isinstance(p, LinearParams):
            p = LinearParams((p.weight - lr * g[0]).astype(p.weight.dtype), (p.bias - lr * g[1]).astype(p.bias.dtype))
        params.append(p)
    return Network(net.spec, tuple(params), net.input_channels)


def describe(spec: NetworkSpec) -> str:
    return f"{len(spec.layers)} layers, split={spec.split}, dtype={dtype_name(dtype_of(spec.dtype))}"
