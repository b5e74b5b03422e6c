"""Grasp annotations from tracked marker positions.

Four LED markers sit on the gripper plates.  Markers (1, 2) and (3, 4) span
the two grasping edges, so every tracking cycle yields a parallelogram that is
converted to an oriented grasp rectangle.  Rectangles drawn by hand on a first
frame can be carried to later frames through a planar homography fitted to
the marker correspondences.

Angles are in degrees, measured in image coordinates (x right, y down) as
``atan2(dy, dx)`` and folded into ``[0, 180)``.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .events import HEIGHT, WIDTH
from .smp_filter import effective_sample_size, estimate_position, systematic_resample


class AnnotationError(ValueError):
    pass


class AlignmentError(AnnotationError):
    pass


class DegenerateQuadError(AnnotationError):
    pass


class DegenerateRectError(AnnotationError):
    pass


class HomographyError(AnnotationError):
    pass


class ProjectionError(AnnotationError):
    pass


class Label(str, enum.Enum):
    GOOD = "GOOD"
    BAD = "BAD"


# ---------------------------------------------------------------------------
# period alignment across recording steps


@dataclass(frozen=True)
class RecordingSegments:
    """Per-step aligned intervals of one motion period.

    ``n[i]`` is the smallest integer with ``end[-1] - n[i] * period <= end[i]``
    and ``intervals[i] = [end[-1] - n[i] * period, end[-1] - (n[i] - 1) * period]``.
    ``overrun[i]`` flags intervals that extend past ``end[i]``.
    """

    end_times: np.ndarray
    start_times: np.ndarray
    period: float
    n: np.ndarray
    intervals: np.ndarray  # (steps, 2)
    overrun: np.ndarray

    def map_time(self, phase: float, step: int) -> float:
        """Absolute time in ``step`` of a phase (µs from the aligned interval start)."""
        if not 0 <= phase <= self.period:
            raise AlignmentError(f"phase {phase} outside [0, {self.period}]")
        return float(self.intervals[step, 0] + phase)


def align_periods(end_times: Sequence[float], period: float,
                  start_times: Optional[Sequence[float]] = None) -> RecordingSegments:
    """Align one motion period across the recording steps.

    Parameters
    ----------
    end_times : sequence of float
        Strictly increasing end time of every step (µs); the last one is the
        reference.
    period : float
        Motion period ``T`` (µs).
    start_times : sequence of float, optional
        Start of every step.  Defaults to the previous step's end, and 0 for
        the first step.
    """
    end = np.asarray(end_times, dtype=np.float64)
    if end.ndim != 1 or end.size == 0:
        raise AlignmentError("need at least one step end time")
    if not period > 0:
        raise AlignmentError("period must be positive")
    if np.any(np.diff(end) <= 0):
        raise AlignmentError("step end times must be strictly increasing")
    if start_times is None:
        start = np.concatenate([[0.0], end[:-1]])
    else:
        start = np.asarray(start_times, dtype=np.float64)
        if start.shape != end.shape or np.any(start >= end):
            raise AlignmentError("each step needs a start time before its end time")
    span = end - start
    short = np.flatnonzero(span < period)
    if short.size:
        raise AlignmentError(
            f"period {period} exceeds the span of step(s) {(short + 1).tolist()}")
    ref = end[-1]
    n = np.ceil((ref - end) / period).astype(np.int64)
    lo = ref - n * period
    hi = ref - (n - 1) * period
    intervals = np.stack([lo, hi], axis=-1)
    return RecordingSegments(end, start, float(period), n, intervals, hi > end)


# ---------------------------------------------------------------------------
# quads and rectangles


@dataclass(frozen=True)
class GraspQuad:
    """Marker parallelogram; ``vertices[i]`` belongs to marker ``i + 1``."""

    vertices: np.ndarray  # (4, 2)
    label: Label = Label.GOOD
    t: int = 0

    GRASPING_EDGES = ((0, 1), (2, 3))
    AUXILIARY_EDGES = ((0, 2), (1, 3))

    def grasping_edges(self) -> tuple[np.ndarray, np.ndarray]:
        v = self.vertices
        return np.stack([v[0], v[1]]), np.stack([v[2], v[3]])

    def auxiliary_edges(self) -> tuple[np.ndarray, np.ndarray]:
        v = self.vertices
        return np.stack([v[0], v[2]]), np.stack([v[1], v[3]])


@dataclass(frozen=True)
class GraspRect:
    cx: float
    cy: float
    w: float
    h: float
    theta: float  # degrees in [0, 180)
    label: Label = Label.GOOD
    t: int = 0

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h, "theta_deg": self.theta}


def quad_from_markers(positions, label=Label.GOOD, t: int = 0, min_separation: float = 0.5,
                      check_bounds: bool = True) -> GraspQuad:
    """Bind four marker positions (ids 1..4 in order) to a :class:`GraspQuad`."""
    v = np.asarray(positions, dtype=np.float64)
    if v.shape != (4, 2):
        raise DegenerateQuadError(f"expected 4 positions of shape (4, 2), got {v.shape}")
    if not np.isfinite(v).all():
        raise DegenerateQuadError("marker positions must be finite")
    if check_bounds and (np.any(v < 0) or np.any(v[:, 0] > WIDTH - 1) or np.any(v[:, 1] > HEIGHT - 1)):
        raise DegenerateQuadError("marker position outside the sensor")
    for i, j in itertools.combinations(range(4), 2):
        if np.hypot(*(v[i] - v[j])) < min_separation:
            raise DegenerateQuadError(f"markers {i + 1} and {j + 1} coincide")
    return GraspQuad(v.copy(), Label(label), int(t))


def _fold_angle(deg: float) -> float:
    a = math.fmod(deg, 180.0)
    if a < 0:
        a += 180.0
    return 0.0 if a >= 180.0 else a


def quad_to_rect(q: GraspQuad, min_height: float = 1.0) -> GraspRect:
    """Fit the oriented rectangle of a (possibly non-parallel) grasp quad.

    ``w`` is the mean grasping-edge length, the orientation is the mean of
    the two edge directions after putting them on the same half-turn branch,
    and ``h`` is the distance between the lines of that orientation through
    the two grasping-edge midpoints.  Exact parallelograms keep their area.
    """
    v = q.vertices
    e1 = v[1] - v[0]
    e2 = v[3] - v[2]
    l1, l2 = math.hypot(*e1), math.hypot(*e2)
    if l1 == 0 or l2 == 0:
        raise DegenerateQuadError("grasping edge of zero length")
    u1, u2 = e1 / l1, e2 / l2
    if u1 @ u2 < 0:
        u2 = -u2
    u = u1 + u2
    nu = math.hypot(*u)
    if nu < 1e-12:
        raise DegenerateQuadError("grasping edges point in opposite directions")
    u /= nu
    m1 = 0.5 * (v[0] + v[1])
    m2 = 0.5 * (v[2] + v[3])
    d = m2 - m1
    h = abs(u[0] * d[1] - u[1] * d[0])
    if h < min_height:
        raise DegenerateRectError(f"rectangle height {h:.3g} px below {min_height} px")
    c = 0.5 * (m1 + m2)
    theta = _fold_angle(math.degrees(math.atan2(u[1], u[0])))
    return GraspRect(float(c[0]), float(c[1]), 0.5 * (l1 + l2), float(h), theta, q.label, q.t)


def rect_corners(r: GraspRect) -> np.ndarray:
    """Corners ``(4, 2)`` in marker order: (v1, v2) and (v3, v4) are the grasping edges."""
    a = math.radians(r.theta)
    u = np.array([math.cos(a), math.sin(a)])
    n = np.array([-u[1], u[0]])
    c = r.center
    hw, hh = 0.5 * r.w * u, 0.5 * r.h * n
    return np.stack([c - hw - hh, c + hw - hh, c - hw + hh, c + hw + hh])


def rect_polygon(r: GraspRect) -> np.ndarray:
    """Corners in counter-clockwise boundary order (for y up; clockwise on screen)."""
    v = rect_corners(r)
    return v[[0, 1, 3, 2]]


def rect_to_quad(r: GraspRect) -> GraspQuad:
    return GraspQuad(rect_corners(r), r.label, r.t)


# ---------------------------------------------------------------------------
# planar map between frames


@dataclass(frozen=True)
class PlanarMap:
    """Homography ``G`` (``G[2, 2] == 1``) and the RANSAC inlier mask."""

    G: np.ndarray
    inliers: np.ndarray

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _apply(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ T[:2, :2].T + T[:2, 2]


def _dlt_rows(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """DLT design matrix ``(..., 2n, 9)`` for point arrays ``(..., n, 2)``."""
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u], axis=-1)
    r2 = np.stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v], axis=-1)
    rows = np.stack([r1, r2], axis=-2)  # (..., n, 2, 9)
    return rows.reshape(rows.shape[:-3] + (-1, 9))


def _solve_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    _, _, vt = np.linalg.svd(_dlt_rows(src, dst))
    return vt[..., -1, :].reshape(vt.shape[:-2] + (3, 3))


def _reprojection_errors(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Forward transfer error per point, ``inf`` where a point maps behind the plane."""
    ph = src @ H[..., :2].swapaxes(-1, -2) + H[..., None, :, 2]
    w = ph[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.hypot(ph[..., 0] / w - dst[..., 0], ph[..., 1] / w - dst[..., 1])
    return np.where(w > 0, err, np.inf)


def _collinear(pts: np.ndarray, tol: float = 1e-9) -> bool:
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    return s[0] == 0 or s[-1] <= tol * s[0]


def _triple_area(p: np.ndarray) -> np.ndarray:
    # smallest triangle area among the 4 triples of each sample, p is (S, 4, 2)
    areas = []
    for i, j, k in itertools.combinations(range(4), 3):
        a, b = p[:, j] - p[:, i], p[:, k] - p[:, i]
        areas.append(np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    return np.min(areas, axis=0)


def _finish(G: np.ndarray) -> np.ndarray:
    if abs(G[2, 2]) < 1e-12:
        raise HomographyError("homography has a vanishing G[2, 2]")
    G = G / G[2, 2]
    if abs(np.linalg.det(G)) < 1e-12:
        raise HomographyError("homography is singular")
    return G


def fit_homography(src, dst) -> np.ndarray:
    """Normalised DLT least-squares homography from ``>= 4`` correspondences."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise HomographyError("src and dst must both be (n, 2)")
    if len(src) < 4:
        raise HomographyError(f"need at least 4 correspondences, got {len(src)}")
    if _collinear(src) or _collinear(dst):
        raise HomographyError("correspondences are collinear (rank deficient)")
    Ts, Td = _normalizer(src), _normalizer(dst)
    Hn = _solve_dlt(_apply(Ts, src), _apply(Td, dst))
    return _finish(np.linalg.inv(Td) @ Hn @ Ts)


def estimate_map(src, dst, threshold: float = 2.0, max_iter: int = 1000, seed: int = 0) -> PlanarMap:
    """RANSAC homography between matched points.

    Minimal 4-point samples are enumerated exhaustively when there are at
    most ``max_iter`` of them, otherwise ``max_iter`` samples are drawn with a
    fixed seed.  The best hypothesis (most inliers, then lowest inlier error)
    is refitted on all of its inliers.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise HomographyError("src and dst must both be (n, 2)")
    n = len(src)
    if n < 4:
        raise HomographyError(f"need at least 4 correspondences, got {n}")
    if _collinear(src) or _collinear(dst):
        raise HomographyError("correspondences are collinear (rank deficient)")

    if math.comb(n, 4) <= max_iter:
        samples = np.array(list(itertools.combinations(range(n), 4)))
    else:
        rng = np.random.default_rng(seed)
        samples = np.argsort(rng.random((max_iter, n)), axis=1)[:, :4]

    Ts, Td = _normalizer(src), _normalizer(dst)
    ns, nd = _apply(Ts, src), _apply(Td, dst)
    ok = (_triple_area(ns[samples]) > 1e-6) & (_triple_area(nd[samples]) > 1e-6)
    samples = samples[ok]
    if len(samples) == 0:
        raise HomographyError("no non-degenerate minimal sample")
    Hn = _solve_dlt(ns[samples], nd[samples])
    H = np.linalg.inv(Td) @ Hn @ Ts
    err = _reprojection_errors(H, src[None], dst[None])
    inl = err <= threshold
    count = inl.sum(axis=1)
    cost = np.where(inl, err, 0.0).sum(axis=1)
    best = np.lexsort((cost, -count))[0]
    mask = inl[best]
    if mask.sum() < 4:
        raise HomographyError(f"only {int(mask.sum())} inliers, need 4")
    G = fit_homography(src[mask], dst[mask])
    return PlanarMap(G, mask)


def project_points(G, pts) -> np.ndarray:
    """Map ``(n, 2)`` points through ``G`` and de-homogenise."""
    G = G.G if isinstance(G, PlanarMap) else np.asarray(G, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    ph = pts @ G[:, :2].T + G[:, 2]
    if np.any(ph[:, 2] <= 0):
        raise ProjectionError("a point maps to a non-positive homogeneous coordinate")
    return ph[:, :2] / ph[:, 2:]


def propagate_rects(rects: Iterable[GraspRect], G, t: Optional[int] = None) -> list[GraspRect]:
    """Carry rectangles into another frame through ``G``.

    Corners are mapped in homogeneous coordinates and the mapped quad is
    re-fitted with :func:`quad_to_rect`.  ``t`` overrides the timestamp.
    """
    out = []
    for r in rects:
        v = project_points(G, rect_corners(r))
        q = GraspQuad(v, r.label, r.t if t is None else int(t))
        out.append(quad_to_rect(q))
    return out


class PlanarMapEstimator(BaseEstimator, TransformerMixin):
    """sklearn-style wrapper: ``fit(src, dst)`` then ``transform(points)``."""

    def __init__(self, threshold: float = 2.0, max_iter: int = 1000, random_state: int = 0):
        self.threshold = threshold
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y):
        self.map_ = estimate_map(X, y, self.threshold, self.max_iter, self.random_state)
        self.inlier_mask_ = self.map_.inliers
        return self

    def transform(self, X):
        return project_points(self.map_, X)


# ---------------------------------------------------------------------------
# track smoothing


def smooth_tracks(tracks, sigma: float = 2.0, n_particles: int = 500, outlier_floor: bool = True,
                  seed: int = 0) -> np.ndarray:
    """Causal particle smoothing of tracked positions.

    Parameters
    ----------
    tracks : ndarray of shape (K, 2) or (K, L, 2)
        Time-ordered raw positions of one or ``L`` markers.
    sigma : float
        Random-walk step and likelihood width (px).
    outlier_floor : bool
        Add the density at ``3 sigma`` to the Gaussian likelihood, so a single
        far-off point barely moves the estimate.

    Returns
    -------
    ndarray
        Smoothed positions, same shape as ``tracks``.
    """
    z = np.asarray(tracks, dtype=np.float64)
    single = z.ndim == 2
    if single:
        z = z[:, None, :]
    K, L, _ = z.shape
    out = np.empty_like(z)
    if K == 0:
        return out[:, 0] if single else out
    rng = np.random.default_rng(seed)
    floor = math.exp(-0.5 * 9.0) if outlier_floor else 0.0
    pos = z[0][:, None, :] + sigma * rng.standard_normal((L, n_particles, 2))
    w = np.full((L, n_particles), 1.0 / n_particles)
    inv = 1.0 / (2.0 * sigma * sigma)
    for k in range(K):
        if k:
            pos = pos + sigma * rng.standard_normal(pos.shape)
        d2 = ((pos - z[k][:, None, :]) ** 2).sum(axis=-1)
        lik = np.exp(-d2 * inv) + floor
        w = w * lik
        s = w.sum(axis=-1, keepdims=True)
        w = np.where(s > 0, w / np.where(s > 0, s, 1.0), 1.0 / n_particles)
        out[k] = estimate_position(pos, w)
        low = effective_sample_size(w) < 0.5 * n_particles
        if low.any():
            r = np.flatnonzero(low)
            idx = systematic_resample(w[r], rng)
            pos[r] = pos[r[:, None], idx]
            w[r] = 1.0 / n_particles
    return out[:, 0] if single else out


class TrackSmoother(BaseEstimator, TransformerMixin):
    def __init__(self, sigma: float = 2.0, n_particles: int = 500, outlier_floor: bool = True,
                 random_state: int = 0):
        self.sigma = sigma
        self.n_particles = n_particles
        self.outlier_floor = outlier_floor
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if not self.sigma > 0 or self.n_particles < 1:
            raise ValueError("sigma must be positive and n_particles at least 1")
        return self

    def transform(self, X):
        return smooth_tracks(X, self.sigma, self.n_particles, self.outlier_floor, self.random_state)


# ---------------------------------------------------------------------------
# annotation files


def annotation_record(r: GraspRect, corners: bool = True) -> dict:
    rec = {"t_us": int(r.t), "label": Label(r.label).value, "rect": r.to_dict()}
    if corners:
        rec["corners"] = rect_corners(r).tolist()
    return rec


def write_annotations(path, rects: Iterable[GraspRect], corners: bool = True) -> None:
    with open(path, "w") as fh:
        for r in rects:
            fh.write(json.dumps(annotation_record(r, corners)) + "\n")


def parse_annotation(rec: dict) -> GraspRect:
    try:
        rr = rec["rect"]
        return GraspRect(float(rr["cx"]), float(rr["cy"]), float(rr["w"]), float(rr["h"]),
                         _fold_angle(float(rr["theta_deg"])), Label(rec.get("label", "GOOD")),
                         int(rec["t_us"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationError(f"bad annotation record {rec!r}: {exc}") from exc


def read_annotations(path) -> list[GraspRect]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            out.append(parse_annotation(rec))
    return out
