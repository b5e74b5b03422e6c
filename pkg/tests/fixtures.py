"""Hand-built evaluation fixture with accuracies worked out by hand.

Every ground truth is a 10 x 10 box at (50, 50), theta 0.  Two such boxes
offset by ``dx`` along x overlap with Jaccard ``(10 - dx) / (10 + dx)``; a
square rotated about its centre keeps Jaccard above 0.7 at any angle.
"""

import numpy as np

from evgrasp.annotation import GraspRect
from evgrasp.metrics import GraspPrediction, Sample

GT = GraspRect(50, 50, 10, 10, 0)


def _box(dx=0.0, theta=0.0):
    return GraspRect(50 + dx, 50, 10, 10, theta)


def ten_samples() -> list[Sample]:
    far = GraspRect(150, 120, 10, 10, 0)
    rows = [
        ("s01", [GraspPrediction(_box())], [GT]),                    # exact
        ("s02", [GraspPrediction(_box(5.0))], [GT]),                 # J = 1/3
        ("s03", [GraspPrediction(_box(4.5))], [GT]),                 # J = 5.5/14.5
        ("s04", [GraspPrediction(_box(6.0))], [GT]),                 # J = 0.25, strict miss
        ("s05", [GraspPrediction(_box(theta=20.0))], [GT]),          # angle 20, strict miss at 20
        ("s06", [GraspPrediction(_box(theta=17.0))], [GT]),          # angle 17
        ("s07", [], [GT]),                                           # no output
        ("s08", [GraspPrediction(_box(), angle_class=0)], [GT]),     # non-grasp only
        ("s09", [GraspPrediction(_box(), 0.2), GraspPrediction(far, 0.9)], [GT]),  # top-1 wrong
        ("s10", [GraspPrediction(_box())], [far, GT]),               # matches second truth
    ]
    return [Sample(sid, f"obj{i % 3}", preds, gts) for i, (sid, preds, gts) in enumerate(rows)]


# rows: jaccard 0.25, 0.30, 0.35, 0.40; columns: angle 15, 20, 25, 30
EXPECTED_CORRECT = np.array([
    [4, 5, 6, 6],
    [4, 5, 6, 6],
    [3, 4, 5, 5],
    [2, 3, 4, 4],
])
