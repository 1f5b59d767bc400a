import numpy as np
import pytest

from streamcnn.network import LayerSpec, NetworkSpec, validate
from streamcnn.overlap_probe import receptive_field


def random_prefix(rng: np.random.Generator, depth: int, max_stride: int = 16, channels=(1, 3), pools: bool = True):
    layers, stride = [], 1
    while len(layers) < depth:
        u = rng.random()
        if u < 0.55:
            s = int(rng.choice([1, 2])) if stride * 2 <= max_stride else 1
            layers.append(
                LayerSpec("conv", out=int(rng.integers(channels[0], channels[1] + 1)), k=int(rng.choice([1, 3, 5, 7])), stride=s, bias=bool(rng.random() < 0.7))
            )
        elif u < 0.8 or not pools:
            layers.append(LayerSpec("relu"))
        else:
            s = int(rng.choice([1, 2])) if stride * 2 <= max_stride else 1
            layers.append(LayerSpec("maxpool", k=int(rng.choice([2, 3])), stride=s))
        stride *= layers[-1].stride
    return layers


def random_tail(rng: np.random.Generator):
    u = rng.random()
    if u < 0.25:
        return []
    tail = []
    if u < 0.6:
        tail += [LayerSpec("conv", out=int(rng.integers(1, 4)), k=int(rng.choice([1, 3])), stride=1, bias=True), LayerSpec("relu")]
    return tail + [LayerSpec("flatten"), LayerSpec("linear", out=int(rng.integers(2, 5)))]


def random_net_case(rng: np.random.Generator, max_depth: int = 8, max_size: int = 256, dtype: str = "f64", max_stride: int = 16):
    """A random sequential spec with a 2D input shape it accepts, prefix depth 1..max_depth."""
    while True:
        depth = int(rng.integers(1, max_depth + 1))
        prefix = random_prefix(rng, depth, max_stride)
        tail = random_tail(rng)
        r, s = receptive_field(prefix)
        lo = max(r + 2 * s, 8)
        if lo + 3 > max_size:
            continue
        size = tuple(int(v) for v in rng.integers(lo, min(max_size, lo + 120) + 1, size=2))
        if rng.random() < 0.15:
            size = (max_size, max_size)
        spec = NetworkSpec(tuple(prefix + tail), len(prefix), dtype)
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), *size)
        try:
            validate(spec, shape)
        except ValueError:
            continue
        return spec, shape


def assert_plan_partitions(plan, spec, shape):
    """Unique regions tile every planned level exactly once; tiles are aligned and in bounds."""
    trace = validate(spec, shape)
    for t in range(plan.n_tiles):
        for (a, b), n in zip(plan.input_region(t), shape[2:]):
            assert 0 <= a < b <= n
        for c, s in zip(plan.tile_coordinates[t], plan.output_stride):
            assert c % s == 0
    for level in set(plan.levels) | {spec.split}:
        cover = np.zeros(trace.shapes[level][2:], dtype=np.int64)
        for t in range(plan.n_tiles):
            cover[tuple(slice(a, b) for a, b in plan.unique(t, level))] += 1
        assert (cover == 1).all(), f"level {level} is not partitioned"
    assert plan.output_regions == tuple(plan.unique(t, spec.split) for t in range(plan.n_tiles))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
