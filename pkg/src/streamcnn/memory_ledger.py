"""Analytic accounting of live tensor bytes.

Executors call ``alloc``/``free`` explicitly for every tensor they own, so peak
figures are deterministic and independent of the allocator. Only payload bytes
are counted (element count times dtype size). Tensors owned by the caller,
such as the full input image, are not counted.
"""

from __future__ import annotations

import contextlib
import contextvars
import json
import threading
import time
from dataclasses import dataclass, field
from math import prod
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


@dataclass(frozen=True)
class Event:
    seq: int
    op: str
    tag: str
    nbytes: int
    current: int
    t: float


@dataclass
class AllocationLedger:
    current_bytes: int = 0
    peak_bytes: int = 0
    events: list[Event] = field(default_factory=list)
    phase_peaks: dict[str, int] = field(default_factory=dict)
    _live: dict[int, tuple[str, int]] = field(default_factory=dict, repr=False)
    _next: int = field(default=0, repr=False)
    _phase: str | None = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def alloc(self, tag: str, t: np.ndarray | int) -> int:
        nbytes = int(t) if isinstance(t, (int, np.integer)) else int(t.nbytes)
        with self._lock:
            h = self._next
            self._next += 1
            self._live[h] = (tag, nbytes)
            self.current_bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self.current_bytes)
            if self._phase is not None:
                self.phase_peaks[self._phase] = max(self.phase_peaks.get(self._phase, 0), self.current_bytes)
            self.events.append(Event(len(self.events), "alloc", tag, nbytes, self.current_bytes, time.perf_counter()))
        return h

    def free(self, handle: int | None) -> None:
        if handle is None:
            return
        with self._lock:
            try:
                tag, nbytes = self._live.pop(handle)
            except KeyError:
                raise RuntimeError(f"ledger handle {handle} freed twice or never allocated") from None
            self.current_bytes -= nbytes
            self.events.append(Event(len(self.events), "free", tag, nbytes, self.current_bytes, time.perf_counter()))

    @contextlib.contextmanager
    def phase(self, name: str) -> Iterator[None]:
        prev = self._phase
        self._phase = name
        self.phase_peaks[name] = max(self.phase_peaks.get(name, 0), self.current_bytes)
        try:
            yield
        finally:
            self._phase = prev

    def live_tags(self) -> list[str]:
        return [tag for tag, _ in self._live.values()]

    def report(self) -> dict:
        return {
            "peak_bytes": self.peak_bytes,
            "current_bytes": self.current_bytes,
            "phases": dict(self.phase_peaks),
            "n_events": len(self.events),
        }

    def dump_json(self, path: str | Path) -> None:
        doc = self.report()
        doc["events"] = [
            {"seq": e.seq, "op": e.op, "tag": e.tag, "bytes": e.nbytes, "current": e.current, "t": e.t}
            for e in self.events
        ]
        Path(path).write_text(json.dumps(doc, indent=1))


class _NullLedger:
    """Stand-in used outside an instrumented scope."""

    def alloc(self, tag, t):
        return None

    def free(self, handle):
        pass

    @contextlib.contextmanager
    def phase(self, name):
        yield


_NULL = _NullLedger()
_active: contextvars.ContextVar[AllocationLedger | None] = contextvars.ContextVar("ledger", default=None)


def current() -> AllocationLedger | _NullLedger:
    led = _active.get()
    return _NULL if led is None else led


@contextlib.contextmanager
def tracking(ledger: AllocationLedger | None = None) -> Iterator[AllocationLedger]:
    """Route all executor allocations inside the block to ``ledger``."""
    led = AllocationLedger() if ledger is None else ledger
    token = _active.set(led)
    try:
        yield led
    finally:
        _active.reset(token)


def nbytes(shape: Sequence[int], dtype) -> int:
    return prod(shape) * np.dtype(dtype).itemsize


# -- closed forms ----------------------------------------------------------------


def forward_retained_bytes(trace, dtype) -> int:
    """Bytes a storing forward pass keeps alive: every layer output plus max-pool index maps.

    ``trace`` is a :class:`streamcnn.network.ShapeTrace`.
    """
    total = 0
    for layer, shape in zip(trace.layers, trace.shapes[1:]):
        total += nbytes(shape, dtype)
        if layer.kind == "maxpool":
            total += nbytes(shape, np.int64)
    return total


def full_pass_peak(trace, dtype, param_shapes) -> int:
    """Peak of ``forward_full`` followed by ``backward_full``, replaying their schedule.

    Must agree exactly with a measured ledger; the tests hold both to that.
    """
    acts = [nbytes(s, dtype) for s in trace.shapes[1:]]
    idx = [nbytes(s, np.int64) if l.kind == "maxpool" else 0 for l, s in zip(trace.layers, trace.shapes[1:])]
    live = sum(acts) + sum(idx)
    peak = live
    # backward: the loss gradient is caller-owned; then per layer, from the top
    g_out = 0
    for l in range(len(trace.layers) - 1, -1, -1):
        for shape in param_shapes[l]:
            live += nbytes(shape, dtype)
        peak = max(peak, live)
        live += nbytes(trace.shapes[l], dtype)
        peak = max(peak, live)
        live -= g_out + acts[l] + idx[l]
        g_out = nbytes(trace.shapes[l], dtype)
    return peak
