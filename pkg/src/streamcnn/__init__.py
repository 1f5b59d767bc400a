"""Train CNNs on large inputs by streaming the early layers tile by tile."""

from .network import NetworkSpec, backward_full, bundled_spec, forward_full, init_network, load_spec, parse_spec
from .overlap_probe import analytic_overlap, probe
from .streaming import plan_grid, plan_tiles, saliency, stream_backward, stream_forward, stream_stats

__all__ = [
    "NetworkSpec",
    "analytic_overlap",
    "backward_full",
    "bundled_spec",
    "forward_full",
    "init_network",
    "load_spec",
    "parse_spec",
    "plan_grid",
    "plan_tiles",
    "probe",
    "saliency",
    "stream_backward",
    "stream_forward",
    "stream_stats",
]
