"""Synthetic motif-count images and a training loop that runs streamed and conventional SGD side by side."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .network import (
    Network,
    NetworkSpec,
    backward_full,
    bundled_spec,
    cross_entropy,
    forward_full,
    init_network,
    sgd_step,
)
from .streaming import TilePlan, plan_grid, stream_backward, stream_forward
from .tensor_core import dtype_of

# 4x4 checkerboard: only fine spatial detail distinguishes it from the noise floor
MOTIF = np.indices((4, 4)).sum(axis=0) % 2 * 2.0 - 1.0


@dataclass(frozen=True)
class MotifDataConfig:
    n_images: int = 40
    size: int = 64
    channels: int = 3
    n_classes: int = 10
    noise: float = 0.1
    seed: int = 0


def motif_dataset(cfg: MotifDataConfig, dtype: str = "f64") -> tuple[np.ndarray, np.ndarray]:
    """Images whose label is the number of checkerboard motifs they contain, minus one.

    Motifs sit on a coarse grid of non-overlapping cells so counts are unambiguous.
    Everything is drawn from one seeded generator, so the set is bit-reproducible.
    """
    rng = np.random.default_rng(cfg.seed)
    cells = [(r, c) for r in range(1, cfg.size - 4, 6) for c in range(1, cfg.size - 4, 6)]
    if len(cells) < cfg.n_classes:
        raise ValueError(f"{cfg.size}x{cfg.size} images are too small for {cfg.n_classes} motifs")
    x = rng.normal(0.0, cfg.noise, (cfg.n_images, cfg.channels, cfg.size, cfg.size))
    y = np.arange(cfg.n_images) % cfg.n_classes
    rng.shuffle(y)
    for i, label in enumerate(y):
        for j in rng.choice(len(cells), size=label + 1, replace=False):
            r, c = cells[j]
            x[i, :, r : r + 4, c : c + 4] += MOTIF * rng.uniform(0.5, 1.0)
    return x.astype(dtype_of(dtype)), y


def batches(n: int, batch: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i : i + batch]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch: int = 4
    lr: float = 0.01
    grid: tuple[int, int] = (2, 2)
    seed: int = 0
    dtype: str = "f64"
    mode: str = "both"  # stream | full | both


@dataclass
class EpochRecord:
    epoch: int
    loss: dict[str, float]
    accuracy: dict[str, float]


def train_step(net: Network, x, y, plan: TilePlan | None, lr: float, train: bool = True):
    """One cross-entropy SGD step (streamed when ``plan`` is given); returns (net, loss, n_correct)."""
    if plan is None:
        pred, store = forward_full(net, x)
    else:
        pred, state = stream_forward(net, x, plan)
    loss, g = cross_entropy(pred, y)
    correct = int((pred.argmax(axis=1) == y).sum())
    if not train:
        return net, loss, correct
    grads = backward_full(net, store, g) if plan is None else stream_backward(net, x, plan, state, g)
    return sgd_step(net, grads, lr), loss, correct


def train_demo(cfg: TrainConfig, data: MotifDataConfig | None = None, spec: NetworkSpec | None = None) -> list[EpochRecord]:
    """Train from one initialization with conventional and/or streamed passes.

    Epoch 0 is the evaluation of the initial network. Later epochs report the
    mean mini-batch loss (measured before each update) and the accuracy of
    those same forward passes. Both modes see the same batch order.
    """
    data = data or MotifDataConfig(seed=cfg.seed)
    spec = (spec or bundled_spec("demo")).with_dtype(cfg.dtype)
    x, y = motif_dataset(data, cfg.dtype)
    modes = ["stream", "full"] if cfg.mode == "both" else [cfg.mode]
    net0 = init_network(spec, (cfg.batch,) + x.shape[1:], seed=cfg.seed)
    nets = {m: net0 for m in modes}
    plans = {"full": None, "stream": plan_grid(spec, x.shape[2:], cfg.grid)}
    records = []
    for epoch in range(cfg.epochs + 1):
        order_rng = np.random.default_rng([cfg.seed, epoch])
        idx_batches = list(batches(len(y), cfg.batch, order_rng))
        loss, acc = {}, {}
        for m in modes:
            total, correct = 0.0, 0
            for idx in idx_batches:
                nets[m], l, c = train_step(nets[m], x[idx], y[idx], plans[m], cfg.lr, train=epoch > 0)
                total += l * len(idx)
                correct += c
            loss[m] = total / len(y)
            acc[m] = correct / len(y)
        records.append(EpochRecord(epoch, loss, acc))
    return records
