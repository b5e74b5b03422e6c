"""Event-camera toolkit for frequency-coded LED markers and grasp annotation.

Modules
-------
events      event records, file formats, pixel state machine, transition intervals
encoders    frequency, SAE and LIF frame encoders
smp_filter  spatiotemporal mixed particle filter for multi-marker tracking
annotation  marker quads to grasp rectangles, homography propagation
metrics     rectangle metric, angle classes, detection losses, evaluation
synth       synthetic LED event streams and interval histograms
cli         ``evgrasp`` command line
"""

__version__ = "0.1.0"

from .annotation import GraspQuad, GraspRect, PlanarMap, estimate_map, quad_from_markers, quad_to_rect
from .encoders import FrequencyEncoder, LIFEncoder, MergedEncoder, SAEEncoder
from .events import EVENT_DTYPE, HEIGHT, INTERVAL_DTYPE, WIDTH, compute_intervals, read_events, write_events
from .metrics import EvalConfig, SplitSpec, evaluate, is_correct, jaccard
from .smp_filter import SMPTracker
from .synth import SyntheticScene, benchmark_scene, generate, interval_histogram

__all__ = [
    "EVENT_DTYPE", "INTERVAL_DTYPE", "WIDTH", "HEIGHT", "read_events", "write_events", "compute_intervals",
    "FrequencyEncoder", "SAEEncoder", "LIFEncoder", "MergedEncoder", "SMPTracker",
    "GraspQuad", "GraspRect", "PlanarMap", "quad_from_markers", "quad_to_rect", "estimate_map",
    "EvalConfig", "SplitSpec", "jaccard", "is_correct", "evaluate",
    "SyntheticScene", "benchmark_scene", "generate", "interval_histogram",
]
