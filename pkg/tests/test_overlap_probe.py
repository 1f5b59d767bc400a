import hashlib

import numpy as np
import pytest

from conftest import random_prefix
from streamcnn.network import LayerSpec, NetworkSpec, SpecError, init_network, layer_forward
from streamcnn.overlap_probe import (
    NonContiguousInvalidRegion,
    TileTooSmall,
    analytic_overlap,
    check_overlap_order,
    non_max_indices,
    probe,
    receptive_field,
)

C3 = LayerSpec("conv", out=2, k=3)
POOL2 = LayerSpec("maxpool", k=2, stride=2)


def spec_of(prefix, dtype="f64"):
    return NetworkSpec(tuple(prefix) + (LayerSpec("flatten"), LayerSpec("linear", out=2)), len(prefix), dtype)


def brute_force_forward_overlap(prefix, n=48, seed=0):
    """Smallest input overlap for which two stride-aligned tiles reproduce the full output.

    Shrinks the shared input band until the concatenated tile outputs diverge from
    the full forward pass.
    """
    spec = spec_of(prefix)
    x = np.random.default_rng(seed).normal(size=(1, 1, n))
    net = init_network(spec, x.shape, seed)

    def run(v):
        for layer, p in zip(prefix, net.params):
            v, _ = layer_forward(layer, p, v)
        return v

    full = run(x)
    _, stride = receptive_field(prefix)
    cut = stride * (n // (2 * stride))
    best = None
    for o in range(n // 2, -1, -1):
        try:
            a = run(x[..., : cut + o])
        except ValueError:
            break
        b = run(x[..., cut:])
        ok = a.shape[-1] + b.shape[-1] >= full.shape[-1]
        if ok:
            # tile a supplies everything before tile b's first output
            joined = np.concatenate([a[..., : full.shape[-1] - b.shape[-1]], b], axis=-1)
            ok = joined.shape == full.shape and np.allclose(joined, full, rtol=0, atol=1e-12)
        if not ok:
            break
        best = o
    return best


@pytest.mark.parametrize(
    "prefix,expected",
    [([C3], 2), ([C3, C3], 4), ([LayerSpec("conv", out=1, k=1)], 0), ([C3, POOL2, C3], 6)],
)
def test_forward_overlap_examples(prefix, expected):
    assert brute_force_forward_overlap(prefix) == expected
    report = probe(spec_of(prefix), 32)
    assert report.forward_overlap == (expected,)
    assert analytic_overlap(spec_of(prefix), 32).forward_overlap == (expected,)
    assert sum(report.invalid_forward[-1][0]) * report.output_stride[0] == expected


def test_pointwise_prefix_has_no_invalid_cells():
    report = probe(spec_of([LayerSpec("conv", out=1, k=1), LayerSpec("relu")]), 16)
    assert report.overlap == (0,)
    assert all(w == ((0, 0),) for w in report.invalid_forward + report.invalid_backward)


def test_non_max_examples():
    assert non_max_indices(np.array([0.33, 0.66, 1, 1, 0.66, 0.33]), 1e-6) == ((2, 2),)
    assert non_max_indices(np.ones((4, 5)), 1e-6) == ((0, 0), (0, 0))
    with pytest.raises(NonContiguousInvalidRegion):
        non_max_indices(np.array([1, 0.5, 1]), 1e-6)


def test_non_max_two_dims():
    t = np.ones((6, 7))
    t[0] = 0.5
    t[:, -2:] = 0.2
    assert non_max_indices(t, 1e-6) == ((1, 0), (0, 2))


def test_stride_is_independent_of_tile_size():
    spec = spec_of([C3, POOL2, C3, LayerSpec("conv", out=2, k=3, stride=2)])
    assert {probe(spec, t).output_stride for t in (40, 41, 57)} == {(4,)}
    assert probe(spec, (44, 63)).output_stride == (4, 4)


def test_random_prefixes_probe_equals_closed_form():
    rng = np.random.default_rng(42)
    checked = 0
    while checked < 200:
        prefix = random_prefix(rng, int(rng.integers(1, 7)), max_stride=8)
        r, s = receptive_field(prefix)
        t = int(rng.integers(2 * r, 2 * r + 3 * s + 20))
        spec = spec_of(prefix)
        report = probe(spec, t)
        assert report == analytic_overlap(spec, t), (prefix, t)
        assert report.output_stride == (s,) and report.receptive_field == (r,)
        assert check_overlap_order(report)
        checked += 1


def test_probe_does_not_touch_parameters():
    spec = spec_of([C3, LayerSpec("relu"), POOL2, C3])
    net = init_network(spec, (1, 2, 24, 24))

    def digest():
        h = hashlib.sha256()
        for l in range(len(spec.layers)):
            for a in net.param_arrays(l):
                h.update(a.tobytes())
        return h.hexdigest()

    before = digest()
    probe(spec, 24)
    assert digest() == before


def test_probe_errors():
    spec = spec_of([LayerSpec("conv", out=1, k=7), LayerSpec("conv", out=1, k=7)])
    with pytest.raises(TileTooSmall):
        probe(spec, 20)
    with pytest.raises(SpecError):
        spec_of([])


def test_f32_probe_agrees():
    spec = spec_of([C3, POOL2, C3, LayerSpec("relu"), LayerSpec("conv", out=1, k=5)], "f32")
    assert probe(spec, 64) == analytic_overlap(spec, 64)
