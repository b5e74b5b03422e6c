"""Rectangle-metric grasp evaluation, angle classes and detection losses."""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from sklearn.model_selection import GroupShuffleSplit, ShuffleSplit

from .annotation import GraspRect, Label, parse_annotation, rect_polygon

JACCARD_GRID = (0.25, 0.30, 0.35, 0.40)
ANGLE_GRID = (15.0, 20.0, 25.0, 30.0)


class SplitError(ValueError):
    pass


class LossWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# polygon overlap


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise in x-right/y-up axes)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def jaccard(gp: GraspRect, gt: GraspRect) -> float:
    """Intersection over union of two oriented rectangles."""
    a, b = rect_polygon(gp), rect_polygon(gt)
    area_a, area_b = abs(polygon_area(a)), abs(polygon_area(b))
    inter = abs(polygon_area(clip_polygon(a, b)))
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def angle_diff(theta_p: float, theta_t: float) -> float:
    """Orientation difference in degrees, in ``[0, 90]``."""
    d = abs(theta_p - theta_t) % 180.0
    return min(d, 180.0 - d)


@dataclass(frozen=True)
class EvalConfig:
    jaccard_threshold: float = 0.25
    angle_threshold: float = 30.0
    n_classes: int = 19

    def __post_init__(self):
        if not (self.jaccard_threshold > 0 and self.angle_threshold > 0):
            raise ValueError("thresholds must be positive")
        if self.n_classes < 1:
            raise ValueError("n_classes must be at least 1")


def is_correct(pred: GraspRect, gt: GraspRect, cfg: EvalConfig = EvalConfig()) -> bool:
    """Both rules hold strictly: angle below threshold and Jaccard above it."""
    return (angle_diff(pred.theta, gt.theta) < cfg.angle_threshold
            and jaccard(pred, gt) > cfg.jaccard_threshold)


# ---------------------------------------------------------------------------
# angle classes


def angle_to_class(theta: float, n_classes: int = 19) -> int:
    """Orientation bin ``1..C`` of an angle in ``[0, 180)``."""
    if not 0.0 <= theta < 180.0:
        raise ValueError(f"angle {theta} outside [0, 180)")
    return min(int(math.floor(theta / (180.0 / n_classes))) + 1, n_classes)


def class_to_angle(label: int, n_classes: int = 19) -> float:
    """Center of orientation bin ``label``; label 0 (non-grasp) has no angle."""
    if label == 0:
        raise ValueError("label 0 is the non-grasp class and has no angle")
    if not 1 <= label <= n_classes:
        raise ValueError(f"label {label} outside 1..{n_classes}")
    return (label - 0.5) * 180.0 / n_classes


# ---------------------------------------------------------------------------
# losses


def smooth_l1(d) -> np.ndarray:
    d = np.abs(np.asarray(d, dtype=np.float64))
    return np.where(d < 1.0, 0.5 * d * d, d - 0.5)


def smooth_l1_loss(offsets_pred, offsets_gt, positive=None) -> float:
    """Smooth-L1 summed over positive boxes and their 4 offset components."""
    p = np.asarray(offsets_pred, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(offsets_gt, dtype=np.float64).reshape(-1, 4)
    if positive is not None:
        mask = np.asarray(positive, dtype=bool)
        p, g = p[mask], g[mask]
    if p.size == 0:
        return 0.0
    return float(smooth_l1(p - g).sum())


def log_softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    m = s.max(axis=-1, keepdims=True)
    z = s - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cls_loss(scores, labels) -> float:
    """Softmax loss; ``labels`` are 0 for negatives and the class ``n >= 1`` for positives."""
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.size == 0:
        return 0.0
    s = s.reshape(lab.size, -1)
    return float(-log_softmax(s)[np.arange(lab.size), lab].sum())


def total_loss(cls_loss: float, reg_loss: float, n_positive: int, alpha: float = 1.0) -> float:
    """``(L_cls + alpha * L_reg) / N``; ``N = 0`` gives 0 with a warning."""
    if n_positive <= 0:
        warnings.warn("no positive boxes: total loss set to 0", LossWarning, stacklevel=2)
        return 0.0
    return (cls_loss + alpha * reg_loss) / n_positive


# ---------------------------------------------------------------------------
# dataset splits and evaluation


class SplitMode(str, enum.Enum):
    IMAGE_WISE = "IMAGE_WISE"
    OBJECT_WISE = "OBJECT_WISE"


@dataclass(frozen=True)
class SplitSpec:
    """Random train/test partition.

    ``test_fraction = 1`` puts every sample in the test set (no training
    partition), which is what a pure evaluation run needs.
    """

    mode: SplitMode = SplitMode.IMAGE_WISE
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", SplitMode(self.mode))
        if not 0 < self.test_fraction <= 1:
            raise SplitError("test_fraction must lie in (0, 1]")

    def split(self, object_ids: Sequence) -> tuple[np.ndarray, np.ndarray]:
        """``(train_idx, test_idx)`` over samples with the given object ids."""
        groups = np.asarray(object_ids)
        n = len(groups)
        if n == 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        if self.mode is SplitMode.OBJECT_WISE and np.unique(groups).size < 2:
            raise SplitError("object-wise split needs at least two objects")
        if self.test_fraction >= 1:
            return np.empty(0, dtype=np.int64), np.arange(n)
        if self.mode is SplitMode.OBJECT_WISE:
            splitter = GroupShuffleSplit(n_splits=1, test_size=self.test_fraction, random_state=self.seed)
            train, test = next(splitter.split(np.zeros(n), groups=groups))
        else:
            if n < 2:
                raise SplitError("image-wise split needs at least two samples")
            splitter = ShuffleSplit(n_splits=1, test_size=self.test_fraction, random_state=self.seed)
            train, test = next(splitter.split(np.zeros(n)))
        return np.sort(train), np.sort(test)


@dataclass(frozen=True)
class GraspPrediction:
    rect: GraspRect
    score: float = 1.0
    angle_class: Optional[int] = None  # 0 marks a non-grasp output

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class Sample:
    sample_id: str
    object_id: str
    predictions: list = field(default_factory=list)
    ground_truth: list = field(default_factory=list)


def top_prediction(preds: Iterable[GraspPrediction]) -> Optional[GraspPrediction]:
    """Highest-score grasp output; non-grasp outputs are ignored, ties keep the first."""
    best = None
    for p in preds:
        if p.angle_class == 0:
            continue
        if best is None or p.score > best.score:
            best = p
    return best


def sample_correct(sample: Sample, cfg: EvalConfig) -> bool:
    top = top_prediction(sample.predictions)
    if top is None:
        return False
    return any(is_correct(top.rect, g, cfg) for g in sample.ground_truth)


def evaluate(samples: Sequence[Sample], split: SplitSpec = SplitSpec(test_fraction=1.0),
             cfg: EvalConfig = EvalConfig(), jaccard_grid: Sequence[float] = JACCARD_GRID,
             angle_grid: Sequence[float] = ANGLE_GRID) -> dict:
    """Top-1 grasp accuracy on the test partition over the threshold grid.

    A sample counts as correct when its highest-score prediction matches
    any ground-truth rectangle of the sample.
    """
    samples = list(samples)
    _, test = split.split([s.object_id for s in samples])
    test_samples = [samples[i] for i in test]
    cells = []
    for jt in jaccard_grid:
        for at in angle_grid:
            c = EvalConfig(jt, at, cfg.n_classes)
            hits = sum(sample_correct(s, c) for s in test_samples)
            acc = hits / len(test_samples) if test_samples else 0.0
            cells.append({"split": split.mode.value, "jaccard_threshold": jt,
                          "angle_threshold": at, "correct": hits, "accuracy": acc})
    hits = sum(sample_correct(s, cfg) for s in test_samples)
    return {
        "split": split.mode.value,
        "test_fraction": split.test_fraction,
        "seed": split.seed,
        "n_samples": len(samples),
        "n_test": len(test_samples),
        "test_sample_ids": [s.sample_id for s in test_samples],
        "jaccard_threshold": cfg.jaccard_threshold,
        "angle_threshold": cfg.angle_threshold,
        "accuracy": hits / len(test_samples) if test_samples else 0.0,
        "grid": cells,
    }


def accuracy_table(report: dict) -> np.ndarray:
    """Grid accuracies as a ``(len(jaccard_grid), len(angle_grid))`` array."""
    js = sorted({c["jaccard_threshold"] for c in report["grid"]})
    an = sorted({c["angle_threshold"] for c in report["grid"]})
    out = np.zeros((len(js), len(an)))
    for c in report["grid"]:
        out[js.index(c["jaccard_threshold"]), an.index(c["angle_threshold"])] = c["accuracy"]
    return out


# ---------------------------------------------------------------------------
# files


def read_predictions(path) -> list[tuple[str, str, GraspPrediction]]:
    """Read ``{sample_id, object_id, score, rect, angle_class?}`` JSON lines."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rect = parse_annotation({"t_us": rec.get("t_us", 0), "label": "GOOD", "rect": rec["rect"]})
                pred = GraspPrediction(rect, float(rec.get("score", 1.0)), rec.get("angle_class"))
                out.append((str(rec["sample_id"]), str(rec.get("object_id", rec["sample_id"])), pred))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad prediction record ({exc})") from exc
    return out


def write_predictions(path, rows: Iterable[tuple[str, str, GraspPrediction]]) -> None:
    with open(path, "w") as fh:
        for sid, oid, p in rows:
            rec = {"sample_id": sid, "object_id": oid, "score": p.score, "rect": p.rect.to_dict()}
            if p.angle_class is not None:
                rec["angle_class"] = int(p.angle_class)
            fh.write(json.dumps(rec) + "\n")


def read_ground_truth(path) -> list[tuple[str, str, GraspRect]]:
    """Annotation JSON lines; ``sample_id``/``object_id`` default to ``t_us``.

    Only GOOD rectangles count as ground truth.
    """
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            rect = parse_annotation(rec)
            if rect.label is not Label.GOOD:
                continue
            sid = str(rec.get("sample_id", rec["t_us"]))
            out.append((sid, str(rec.get("object_id", sid)), rect))
    return out


def build_samples(predictions: Iterable[tuple[str, str, GraspPrediction]],
                  ground_truth: Iterable[tuple[str, str, GraspRect]]) -> list[Sample]:
    """Join predictions and ground truth on ``sample_id`` (first-seen order)."""
    samples: dict[str, Sample] = {}
    for sid, oid, rect in ground_truth:
        samples.setdefault(sid, Sample(sid, oid)).ground_truth.append(rect)
    for sid, oid, pred in predictions:
        samples.setdefault(sid, Sample(sid, oid)).predictions.append(pred)
    return list(samples.values())


def write_report(path, report: Mapping) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
