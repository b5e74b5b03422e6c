"""Synthetic event streams of blinking LED markers with known ground truth.

Each LED is a disk that emits an ON event at every pixel it covers on each
rising edge of its square wave and an OFF event on each falling edge.  All
LEDs share one periodic elliptical motion (the camera moving relative to the
table).  Noise sources: per-event timestamp jitter, uniform background
events, and "ghost" disks that follow a host LED but blink at a foreign
period (reflections and cross-impact between markers).
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .events import EVENT_DTYPE, HEIGHT, WIDTH, compute_intervals, make_events

GT_STEP_US = 1_000


class SceneWarning(UserWarning):
    """Scene violates the tracker's operating regime (generated anyway)."""


@dataclass
class LedSpec:
    period_us: float
    x: float
    y: float
    radius: float = 3.0
    phase_us: float = 0.0
    dropout: float = 0.0


@dataclass
class Motion:
    amplitude_x: float = 0.0
    amplitude_y: float = 0.0
    period_us: float = 1_000_000.0
    phase: float = 0.0

    def offset(self, t_us) -> np.ndarray:
        w = 2 * math.pi / self.period_us
        t = np.asarray(t_us, dtype=np.float64)
        a = w * t + self.phase
        return np.stack([self.amplitude_x * np.sin(a), self.amplitude_y * np.cos(a)], axis=-1)

    @property
    def max_speed_px_per_ms(self) -> float:
        return 2 * math.pi / self.period_us * 1000.0 * max(abs(self.amplitude_x), abs(self.amplitude_y))


@dataclass
class Ghost:
    """Dim disk attached to LED ``host`` that blinks with ``period_us``."""

    host: int
    period_us: float
    radius: float = 1.0
    dx: float = 0.0
    dy: float = 0.0
    phase_us: float = 0.0
    dropout: float = 0.0
    occlude: bool = False  # host pixels under the ghost stop emitting


@dataclass
class SyntheticScene:
    markers: list[LedSpec]
    motion: Motion = field(default_factory=Motion)
    duration_us: int = 1_000_000
    jitter_us: float = 20.0
    background_rate: float = 0.0  # events/s over the whole sensor
    ghosts: list[Ghost] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        for i, m in enumerate(self.markers):
            if m.radius < 1:
                raise ValueError(f"marker {i}: radius must be >= 1 px")
            if m.period_us <= 0:
                raise ValueError(f"marker {i}: period must be positive")
            if not 0 <= m.dropout < 1:
                raise ValueError(f"marker {i}: dropout must be in [0, 1)")
        for g in self.ghosts:
            if not 0 <= g.host < len(self.markers):
                raise ValueError(f"ghost host {g.host} is not a marker index")
        if self.duration_us <= 0:
            raise ValueError("duration must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        d = dict(d)
        d["markers"] = [LedSpec(**m) for m in d.get("markers", [])]
        d["motion"] = Motion(**d.get("motion", {}))
        d["ghosts"] = [Ghost(**g) for g in d.get("ghosts", [])]
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> "SyntheticScene":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def centers(self, t_us) -> np.ndarray:
        """True marker centers, shape ``(len(t), n_markers, 2)``."""
        base = np.array([[m.x, m.y] for m in self.markers], dtype=np.float64).reshape(-1, 2)
        off = self.motion.offset(np.atleast_1d(t_us))
        return base[None, :, :] + off[:, None, :]


@dataclass
class GroundTruth:
    times: np.ndarray  # (K,) us, on 1 ms boundaries
    positions: np.ndarray  # (K, n_markers, 2)
    flagged: bool = False

    def at(self, t_us) -> np.ndarray:
        k = np.searchsorted(self.times, np.asarray(t_us), side="left")
        k = np.clip(k, 0, self.times.size - 1)
        return self.positions[k]

    def rects(self, label: str = "GOOD"):
        """True grasp rectangle per sample time (requires exactly 4 markers)."""
        from .annotation import quad_from_markers, quad_to_rect

        return [quad_to_rect(quad_from_markers(p, label, int(t)))
                for t, p in zip(self.times, self.positions)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_us", "marker_id", "true_x", "true_y"])
            for k, t in enumerate(self.times.tolist()):
                for m in range(self.positions.shape[1]):
                    x, y = self.positions[k, m]
                    w.writerow([t, m + 1, repr(float(x)), repr(float(y))])


def _disk_offsets(radius: float) -> np.ndarray:
    r = int(math.ceil(radius)) + 1
    g = np.arange(-r, r + 1)
    ox, oy = np.meshgrid(g, g)
    return np.stack([ox.ravel(), oy.ravel()], axis=-1)


def _blink_events(center_fn, period_us, phase_us, radius, dropout, duration_us, jitter_us, rng,
                  holes=()):
    edges = np.arange(phase_us, duration_us, period_us / 2.0)
    if edges.size == 0:
        return np.empty(0, dtype=EVENT_DTYPE)
    polarity = (np.arange(edges.size) % 2 == 0).astype(np.uint8)  # first edge rises
    centers = center_fn(edges)  # (E, 2)
    offs = _disk_offsets(radius)
    px = np.rint(centers)[:, None, :] + offs[None, :, :]  # (E, O, 2)
    d2 = ((px - centers[:, None, :]) ** 2).sum(-1)
    keep = d2 <= radius * radius
    keep &= (px[..., 0] >= 0) & (px[..., 0] < WIDTH) & (px[..., 1] >= 0) & (px[..., 1] < HEIGHT)
    for hole_fn, hole_r in holes:
        hc = hole_fn(edges)
        keep &= ((px - hc[:, None, :]) ** 2).sum(-1) > hole_r * hole_r
    if dropout > 0:
        keep &= rng.random(keep.shape) >= dropout
    e_idx, o_idx = np.nonzero(keep)
    t = edges[e_idx] + rng.normal(0.0, jitter_us, e_idx.size) if jitter_us > 0 else edges[e_idx]
    t = np.clip(np.rint(t), 0, None).astype(np.int64)
    xy = px[e_idx, o_idx].astype(np.int64)
    return make_events(t, xy[:, 0], xy[:, 1], polarity[e_idx])


def generate(scene: SyntheticScene) -> tuple[np.ndarray, GroundTruth]:
    """Events (time-ordered ``EVENT_DTYPE``) and ground truth for a scene.

    Scenes moving faster than 1 px/ms raise a :class:`SceneWarning` and the
    ground truth is flagged.
    """
    flagged = scene.motion.max_speed_px_per_ms > 1.0
    if flagged:
        warnings.warn(
            f"marker speed {scene.motion.max_speed_px_per_ms:.3f} px/ms exceeds 1 px/ms",
            SceneWarning, stacklevel=2,
        )
    rng = np.random.default_rng(scene.seed)
    parts = []
    for i, m in enumerate(scene.markers):
        base = np.array([m.x, m.y])
        holes = [(lambda t, b=base + [g.dx, g.dy]: b + scene.motion.offset(t), g.radius)
                 for g in scene.ghosts if g.host == i and g.occlude]
        parts.append(_blink_events(lambda t, b=base: b + scene.motion.offset(t), m.period_us,
                                   m.phase_us, m.radius, m.dropout, scene.duration_us,
                                   scene.jitter_us, rng, holes))
    for g in scene.ghosts:
        host = scene.markers[g.host]
        base = np.array([host.x + g.dx, host.y + g.dy])
        parts.append(_blink_events(lambda t, b=base: b + scene.motion.offset(t), g.period_us,
                                   g.phase_us, g.radius, g.dropout, scene.duration_us,
                                   scene.jitter_us, rng))
    if scene.background_rate > 0:
        n = rng.poisson(scene.background_rate * scene.duration_us / 1e6)
        parts.append(make_events(
            rng.integers(0, scene.duration_us, n), rng.integers(0, WIDTH, n),
            rng.integers(0, HEIGHT, n), rng.integers(0, 2, n),
        ))
    events = np.concatenate(parts) if parts else np.empty(0, dtype=EVENT_DTYPE)
    events = events[np.argsort(events["t"], kind="stable")]

    times = np.arange(0, scene.duration_us + 1, GT_STEP_US, dtype=np.int64)
    gt = GroundTruth(times, scene.centers(times), flagged)
    return events, gt


# ---------------------------------------------------------------------------
# benchmark scenes

BENCHMARK_PERIODS_US = (3000, 3800, 4400, 5000)
BENCHMARK_PROFILES = ("clean", "cross_impact", "reflection", "noisy")
NOISY_PROFILES = ("cross_impact", "reflection", "noisy")


def _cross_impact(host: int, period_us: float, rng) -> Ghost:
    # crosstalk: the centre of the host LED flickers at another marker's period
    return Ghost(host=host, period_us=period_us, radius=1.5,
                 phase_us=float(rng.uniform(0, period_us)), occlude=True)


def _reflection(host: int, period_us: float, rng) -> Ghost:
    # reflected light of another marker, slightly off the host centre and patchy
    ang = rng.uniform(0, 2 * math.pi)
    return Ghost(host=host, period_us=period_us, radius=1.5, dx=math.cos(ang), dy=math.sin(ang),
                 phase_us=float(rng.uniform(0, period_us)), dropout=0.1, occlude=True)


def benchmark_scene(profile: str = "clean", seed: int = 0, duration_us: int = 10_000_000,
                    periods_us: Sequence[float] = BENCHMARK_PERIODS_US) -> SyntheticScene:
    """Four LEDs on the corners of a grasp quad under periodic motion.

    ``clean`` has timestamp jitter only.  The noisy profiles put a small ghost
    blinking at the next marker's period on markers 1 and 3, replacing the
    host's central pixels:

    * ``cross_impact``: ghosts centred on their hosts,
    * ``reflection``: ghosts 1 px off centre with 10% dropout, plus
      background events,
    * ``noisy``: a reflection on marker 1 and cross-impact on marker 3, plus
      background events.
    """
    if profile not in BENCHMARK_PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {BENCHMARK_PROFILES}")
    rng = np.random.default_rng([seed, 7919])
    cx, cy = 120 + rng.uniform(-10, 10), 90 + rng.uniform(-8, 8)
    half_w, half_h = rng.uniform(18, 28), rng.uniform(10, 16)
    tilt = rng.uniform(-0.3, 0.3)
    corners = np.array([[-half_w, -half_h], [half_w, -half_h], [-half_w, half_h], [half_w, half_h]])
    rot = np.array([[math.cos(tilt), -math.sin(tilt)], [math.sin(tilt), math.cos(tilt)]])
    corners = corners @ rot.T + [cx, cy]
    markers = [
        LedSpec(float(p), float(x), float(y), radius=3.0, phase_us=float(rng.uniform(0, p)))
        for p, (x, y) in zip(periods_us, corners)
    ]
    motion = Motion(
        amplitude_x=float(rng.uniform(15, 30)), amplitude_y=float(rng.uniform(8, 20)),
        period_us=float(rng.uniform(800_000, 1_200_000)), phase=float(rng.uniform(0, 2 * math.pi)),
    )
    n = len(markers)
    hosts = [h for h in (0, 2) if h + 1 < n]
    foreign = {h: float(periods_us[h + 1]) for h in hosts}
    ghosts: list[Ghost] = []
    background = 0.0
    if profile == "cross_impact":
        ghosts = [_cross_impact(h, foreign[h], rng) for h in hosts]
    elif profile == "reflection":
        ghosts = [_reflection(h, foreign[h], rng) for h in hosts]
        background = 20_000.0
    elif profile == "noisy":
        makers = (_reflection, _cross_impact)
        ghosts = [makers[k % 2](h, foreign[h], rng) for k, h in enumerate(hosts)]
        background = 20_000.0
    return SyntheticScene(markers=markers, motion=motion, duration_us=int(duration_us),
                          jitter_us=20.0, background_rate=background, ghosts=ghosts, seed=int(seed))


# ---------------------------------------------------------------------------
# interval histogram


@dataclass(frozen=True)
class IntervalHistogram:
    edges: np.ndarray  # (B + 1,) interval bin edges in us
    counts: np.ndarray  # (B,)

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def frequencies_hz(self) -> np.ndarray:
        """Transition frequency (1 / interval) at each bin center."""
        return 1e6 / self.centers

    def modes(self, k: Optional[int] = None, min_separation_bins: int = 3) -> np.ndarray:
        """Bin centers of the strongest local maxima, strongest first."""
        c = self.counts
        order = np.argsort(-c, kind="stable")
        picked: list[int] = []
        for i in order.tolist():
            if c[i] <= 0 or (k is not None and len(picked) >= k):
                break
            if all(abs(i - j) >= min_separation_bins for j in picked):
                picked.append(i)
        return self.centers[picked]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo_us", "bin_hi_us", "freq_hz", "count"])
            for lo, hi, f, n in zip(self.edges[:-1], self.edges[1:], self.frequencies_hz, self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), repr(float(f)), int(n)])


def interval_histogram(stream: np.ndarray, bin_width_us: float = 50.0,
                       max_interval_us: float = 10_000.0) -> IntervalHistogram:
    """Histogram of transition intervals of an event stream (or interval array).

    Intervals are binned in the time domain over ``[0, max_interval_us)``;
    :attr:`IntervalHistogram.frequencies_hz` gives the matching transition
    frequencies.
    """
    if bin_width_us <= 0:
        raise ValueError("bin width must be positive")
    if stream.dtype == EVENT_DTYPE:
        stream = compute_intervals(stream)
    edges = np.arange(0.0, max_interval_us + bin_width_us / 2, bin_width_us)
    counts, _ = np.histogram(stream["delta"], bins=edges)
    return IntervalHistogram(edges, counts)
