import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_net_case
from streamcnn import memory_ledger
from streamcnn.memory_ledger import AllocationLedger, forward_retained_bytes, full_pass_peak, nbytes
from streamcnn.network import backward_full, bundled_spec, forward_full, init_network, validate
from streamcnn.streaming import full_pass_bytes


def test_alloc_arithmetic():
    led = AllocationLedger()
    led.alloc("x", np.zeros((1024, 1024, 3), np.float32))
    assert led.current_bytes == 12_582_912
    assert nbytes((1024, 1024, 3), "float32") == 12_582_912


def test_alloc_free_and_peak():
    led = AllocationLedger()
    h1 = led.alloc("a", 100)
    h2 = led.alloc("b", 50)
    led.free(h1)
    assert led.current_bytes == 50 and led.peak_bytes == 150
    led.free(h2)
    assert led.current_bytes == 0 and led.peak_bytes == 150
    with pytest.raises(RuntimeError):
        led.free(h2)
    led.free(None)


def test_phases_and_dump(tmp_path):
    led = AllocationLedger()
    with led.phase("forward"):
        h = led.alloc("a", 10)
    with led.phase("backward"):
        led.alloc("b", 5)
        led.free(h)
    assert led.report()["phases"] == {"forward": 10, "backward": 15}
    assert led.live_tags() == ["b"]
    led.dump_json(tmp_path / "l.json")
    doc = json.loads((tmp_path / "l.json").read_text())
    assert doc["peak_bytes"] == 15 and [e["op"] for e in doc["events"]] == ["alloc", "alloc", "free"]


def test_untracked_runs_cost_nothing():
    assert isinstance(memory_ledger.current(), memory_ledger._NullLedger)
    with memory_ledger.tracking() as led:
        assert memory_ledger.current() is led
    assert memory_ledger.current() is not led


def measure_full(net, x):
    with memory_ledger.tracking() as led:
        pred, store = forward_full(net, x)
        fwd_peak = led.peak_bytes
        backward_full(net, store, np.ones_like(pred))
    return fwd_peak, led


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), dtype=st.sampled_from(["f32", "f64"]))
def test_full_pass_ledger_matches_closed_form(seed, dtype):
    rng = np.random.default_rng(seed)
    spec, shape = random_net_case(rng, max_size=96, dtype=dtype)
    net = init_network(spec, shape)
    x = rng.normal(size=shape).astype(net.dtype)
    fwd_peak, led = measure_full(net, x)
    assert fwd_peak == forward_retained_bytes(validate(spec, shape), net.dtype)
    assert led.peak_bytes == full_pass_bytes(net, shape)


def test_bench_net_activation_dominates():
    spec = bundled_spec("bench3")
    shape = (1, 3, 1024, 1024)
    trace = validate(spec, shape)
    assert trace.shapes[2] == (1, 64, 1020, 1020)
    assert nbytes(trace.shapes[2], np.float32) == 64 * 1020 * 1020 * 4
    retained = forward_retained_bytes(trace, np.float32)
    assert nbytes(trace.shapes[2], np.float32) / retained > 0.9


def test_full_pass_peak_small_example():
    spec = bundled_spec("bench3")
    shape = (1, 3, 20, 20)
    net = init_network(spec, shape)
    trace = validate(spec, shape)
    params = [[a.shape for a in net.param_arrays(l)] for l in range(3)]
    # outputs 18^2x3, 16^2x64, 14^2x3, then the backward schedule of the top layer
    acts = 4 * (3 * 18**2 + 64 * 16**2 + 3 * 14**2)
    assert forward_retained_bytes(trace, np.float32) == acts
    assert full_pass_peak(trace, np.float32, params) >= acts
    _, led = measure_full(net, np.zeros(shape, np.float32))
    assert led.peak_bytes == full_pass_peak(trace, np.float32, params)
