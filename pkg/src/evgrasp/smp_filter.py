"""Spatiotemporal mixed particle filter for frequency-coded LED markers.

Every marker owns a particle set.  Each 1 ms cycle the sets are moved by a
Gaussian random walk and weighted by

* temporal evidence: how well the transition intervals observed at a
  particle's pixel match the marker's blink period, and
* spatial evidence: the particle's density under a Gaussian fitted to the
  whole temporal-evidence map,

mixed as ``w <- w_prev * (ET + alpha * ES)``.  Sets that see too little
temporal evidence are redrawn from the evidence map; degenerate sets are
resampled systematically.

The building blocks accept a leading marker axis so that a cycle for all
markers runs as a handful of array operations.
"""

from __future__ import annotations

import csv
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .events import (
    EVENT_DTYPE,
    HEIGHT,
    N_PIXELS,
    WIDTH,
    ConfigError,
    WindowView,
    check_window_params,
    compute_intervals,
)

DEFAULT_PERIODS_US = (3000, 3800, 4400, 5000)
DEFAULT_PERIOD_SIGMA_US = 100.0

LOG_DTYPE = np.dtype(
    [
        ("cycle", "<i8"),
        ("t_us", "<i8"),
        ("marker_id", "<i8"),
        ("x", "<f8"),
        ("y", "<f8"),
        ("n_eff", "<f8"),
        ("reselected", "?"),
        ("resampled", "?"),
    ]
)


@dataclass(frozen=True)
class MarkerSpec:
    id: int
    period_us: float
    sigma_us: float = DEFAULT_PERIOD_SIGMA_US

    def __post_init__(self):
        if not (self.period_us > 0 and self.sigma_us > 0):
            raise ConfigError(f"marker {self.id}: period and sigma must be positive")

    @property
    def peak(self) -> float:
        return 2.0 / (5.0 * self.sigma_us)


def default_markers(periods=DEFAULT_PERIODS_US, sigma_us=DEFAULT_PERIOD_SIGMA_US) -> list[MarkerSpec]:
    return [MarkerSpec(i + 1, float(p), float(sigma_us)) for i, p in enumerate(periods)]


def check_markers(markers: Sequence[MarkerSpec]) -> None:
    periods = [m.period_us for m in markers]
    if len(set(periods)) != len(periods):
        raise ConfigError(f"marker periods must be pairwise distinct, got {periods}")


@dataclass(frozen=True)
class FilterConfig:
    alpha: float = 1.0
    proposal_sigma: float = 2.0
    # per-marker; None -> 10 peak-height hits, 10 * 2 / (5 sigma_l)
    reselect_threshold: Optional[float] = None
    resample_threshold: float = 0.5
    min_events_per_pixel: int = 3
    n_particles: int = 1000
    window_us: int = 10_000
    step_us: int = 1_000
    cov_eps: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not self.proposal_sigma >= 0:
            raise ConfigError("proposal_sigma must be >= 0")
        if not 0 < self.resample_threshold <= 1:
            raise ConfigError("resample_threshold must be in (0, 1]")
        if self.n_particles < 1:
            raise ConfigError("n_particles must be >= 1")
        if self.cov_eps <= 0:
            raise ConfigError("cov_eps must be positive")
        check_window_params(self.window_us, self.step_us)

    def reselect_thresholds(self, markers: Sequence[MarkerSpec]) -> np.ndarray:
        if self.reselect_threshold is not None:
            return np.full(len(markers), float(self.reselect_threshold))
        return np.array([10.0 * m.peak for m in markers])


# ---------------------------------------------------------------------------
# temporal evidence


def triangle_pdf(delta, mu, sigma) -> np.ndarray:
    """Unit-area isosceles triangle on ``[mu - 2.5 sigma, mu + 2.5 sigma]``.

    Stands in for the narrow Gaussian ``N(delta | mu, sigma^2)``; peak height
    is ``2 / (5 sigma)``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    half = 2.5 * np.asarray(sigma, dtype=np.float64)
    d = np.abs(delta - mu)
    return np.where(d < half, (1.0 - d / half) / half, 0.0)


def _sparse_evidence(iv_pix, tri, counts_at_pix, min_events):
    """Sum per-interval evidence per pixel.

    Returns ``(pixels, et)`` with ``et`` of shape ``(L, U)`` over the ``U``
    distinct pixels that carry intervals; gated pixels are zeroed.
    """
    L = tri.shape[0]
    if iv_pix.size == 0:
        return np.empty(0, dtype=np.int64), np.zeros((L, 0))
    up, inv = np.unique(iv_pix, return_inverse=True)
    U = up.size
    flat = (inv[None, :] + U * np.arange(L)[:, None]).ravel()
    et = np.bincount(flat, weights=tri.ravel(), minlength=L * U).reshape(L, U)
    gate = counts_at_pix(up) < min_events
    et[:, gate] = 0.0
    return up, et


def temporal_evidence(window: WindowView, marker: MarkerSpec, min_events_per_pixel: int = 3) -> np.ndarray:
    """Per-pixel evidence map ``(HEIGHT, WIDTH)`` for one marker.

    Pixels with fewer than ``min_events_per_pixel`` raw events in the window
    are forced to zero.
    """
    iv = window.intervals
    pix = iv["y"].astype(np.int64) * WIDTH + iv["x"]
    tri = triangle_pdf(iv["delta"], marker.period_us, marker.sigma_us)[None, :]
    counts = window.event_counts().ravel()
    up, et = _sparse_evidence(pix, tri, lambda p: counts[p], min_events_per_pixel)
    out = np.zeros(N_PIXELS)
    out[up] = et[0]
    return out.reshape(HEIGHT, WIDTH)


# ---------------------------------------------------------------------------
# particle operations (leading axes broadcast over markers)

def _moment_basis(coords: np.ndarray) -> np.ndarray:
    x, y = coords[:, 0], coords[:, 1]
    return np.stack([x, y, x * x, x * y, y * y], axis=-1)


_UPPER = np.array([WIDTH - 1, HEIGHT - 1], dtype=np.float64)
_PIXEL_MOMENTS = _moment_basis(
    np.stack([np.arange(N_PIXELS) % WIDTH, np.arange(N_PIXELS) // WIDTH], axis=-1).astype(np.float64))


def clamp_positions(positions: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
    out = np.maximum(positions, 0.0, out=out)
    return np.minimum(out, _UPPER, out=out)


def _nearest_pixel(positions: np.ndarray) -> np.ndarray:
    # positions already inside the sensor; half-pixel ties round up
    x = (positions[..., 0] + 0.5).astype(np.int64)
    y = (positions[..., 1] + 0.5).astype(np.int64)
    return y * WIDTH + x


def pixel_index(positions: np.ndarray) -> np.ndarray:
    """Flat index of the nearest pixel to each (x, y) position."""
    return _nearest_pixel(clamp_positions(positions))


def evidence_at(et_map: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Sample an ``(HEIGHT, WIDTH)`` map at the particles' nearest pixels."""
    return et_map.reshape(-1)[pixel_index(positions)]


def init_particles(n: int, rng: np.random.Generator, n_sets: Optional[int] = None) -> np.ndarray:
    shape = (n, 2) if n_sets is None else (n_sets, n, 2)
    return rng.random(shape) * _UPPER


class NoiseTable:
    """Pre-drawn standard normals handed out as randomly placed slices.

    Drawing fresh normals dominates a filter cycle; a slice at a random offset
    of a large table is still an exact N(0, 1) sample for every particle.
    """

    def __init__(self, size: int, rng: np.random.Generator):
        self.values = rng.standard_normal(int(size), dtype=np.float32)

    def draw(self, shape: tuple, rng: np.random.Generator) -> np.ndarray:
        n = int(np.prod(shape))
        if n > self.values.size:
            raise ValueError(f"noise table of {self.values.size} values cannot supply {n}")
        start = int(rng.integers(0, self.values.size - n + 1))
        return self.values[start:start + n].reshape(shape)


def propagate(positions: np.ndarray, sigma: float, rng: np.random.Generator,
              noise: Optional[NoiseTable] = None) -> np.ndarray:
    """Isotropic Gaussian random walk ``N(x, I sigma^2)``, clamped to the sensor.

    Steps come from ``noise`` when given, otherwise straight from ``rng``.
    """
    if sigma == 0:
        return positions.copy()
    if noise is None:
        step = rng.standard_normal(positions.shape, dtype=np.float32)
    else:
        step = noise.draw(positions.shape, rng)
    out = np.multiply(step, sigma, dtype=np.float64)
    out += positions
    return clamp_positions(out, out=out)


def check_reselect(et_at_particles: np.ndarray, threshold) -> np.ndarray:
    """True where the summed evidence under a set is below the threshold."""
    return et_at_particles.sum(axis=-1) < threshold


def _draw_pixels(pixels: np.ndarray, mass: np.ndarray, n: int, rng) -> np.ndarray:
    cdf = np.cumsum(mass)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    return np.minimum(idx, pixels.size - 1)


def reselect(et_map: np.ndarray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Redraw ``n`` particles on pixels with probability proportional to evidence.

    Falls back to a uniform draw over the sensor when the map is all zero.
    Returns positions ``(n, 2)`` and uniform weights.
    """
    flat = np.asarray(et_map, dtype=np.float64).reshape(-1)
    support = np.flatnonzero(flat > 0)
    if support.size == 0:
        return init_particles(n, rng), np.full(n, 1.0 / n)
    pix = support[_draw_pixels(support, flat[support], n, rng)]
    pos = np.stack([pix % WIDTH, pix // WIDTH], axis=-1).astype(np.float64)
    return pos, np.full(n, 1.0 / n)


def fit_gaussian(coords: np.ndarray, mass: np.ndarray, eps: float = 1e-6,
                 basis: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Mass-weighted mean and covariance (+ eps I) of pixel coordinates.

    ``coords`` is ``(U, 2)``; ``mass`` is ``(..., U)`` and need not be
    normalised.  Returns mean ``(..., 2)`` and covariance ``(..., 2, 2)``.
    """
    if basis is None:
        basis = _moment_basis(np.asarray(coords, dtype=np.float64))
    # coordinates are bounded by the sensor size, so raw moments lose
    # nothing meaningful to cancellation
    m = (mass @ basis) / mass.sum(axis=-1)[..., None]
    mx, my = m[..., 0], m[..., 1]
    cxx = np.maximum(m[..., 2] - mx * mx, 0.0) + eps
    cyy = np.maximum(m[..., 4] - my * my, 0.0) + eps
    cxy = m[..., 3] - mx * my
    cov = np.stack([np.stack([cxx, cxy], -1), np.stack([cxy, cyy], -1)], -2)
    return m[..., :2], cov


def evidence_gaussian(et_map: np.ndarray, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian fit of a dense ``(HEIGHT, WIDTH)`` evidence map."""
    flat = np.asarray(et_map, dtype=np.float64).reshape(-1)
    support = np.flatnonzero(flat > 0)
    if support.size == 0:
        raise ValueError("evidence map is empty")
    coords = np.stack([support % WIDTH, support // WIDTH], axis=-1).astype(np.float64)
    return fit_gaussian(coords, flat[support], eps)


def spatial_evidence(positions: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Gaussian density of each particle, normalised over its set.

    Computed in the log domain; the normalising constant of the Gaussian
    cancels, so far-away sets never underflow to an all-zero vector.
    """
    a, b, d = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    det = a * d - b * b
    # -0.5 * Mahalanobis distance with the inverse covariance folded in
    ia, ib, id_ = (-0.5 * d / det)[..., None], (b / det)[..., None], (-0.5 * a / det)[..., None]
    dx = positions[..., 0] - mean[..., None, 0]
    dy = positions[..., 1] - mean[..., None, 1]
    logv = ia * dx
    logv += ib * dy
    logv *= dx
    dy *= dy
    dy *= id_
    logv += dy
    logv -= logv.max(axis=-1, keepdims=True)
    v = np.exp(logv, out=logv)
    v /= v.sum(axis=-1, keepdims=True)
    return v


def normalize(values: np.ndarray) -> np.ndarray:
    """Scale to unit sum along the last axis; all-zero rows stay zero."""
    s = values.sum(axis=-1, keepdims=True)
    if np.all(s > 0):
        return values / s
    return np.divide(values, s, out=np.zeros_like(values), where=s > 0)


def update_weights(weights: np.ndarray, et: np.ndarray, es: np.ndarray, alpha: float):
    """``w * (ET + alpha * ES)``, renormalised.

    Returns ``(weights, degenerate)``; a set whose weights all vanish is reset
    to uniform and flagged.
    """
    w = et + alpha * es if alpha else et.copy()
    w *= weights
    s = w.sum(axis=-1, keepdims=True)
    degenerate = s[..., 0] <= 0
    if degenerate.any():
        w[degenerate] = 1.0 / w.shape[-1]
        s[degenerate] = 1.0
    w /= s
    return w, degenerate


def effective_sample_size(weights: np.ndarray) -> np.ndarray:
    return 1.0 / np.sum(weights * weights, axis=-1)


@lru_cache(maxsize=8)
def _tiled_arange(rows: int, n: int) -> np.ndarray:
    out = np.tile(np.arange(n), rows)
    out.flags.writeable = False
    return out


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling indices for each row of ``weights`` (``(..., N)``).

    One uniform offset ``u`` per row; output slot ``k`` takes the first
    particle whose scaled cumulative weight ``N * cdf_j`` exceeds ``k + u``.
    """
    w = np.atleast_2d(weights)
    rows, n = w.shape
    cdf = np.cumsum(w, axis=-1)
    cdf *= n / cdf[:, -1:]
    cdf[:, -1] = n
    # shifting row r by r * n makes the ceilings one increasing sequence, so a
    # single flat diff gives every row's copy counts
    cdf += (np.arange(rows) * n - rng.random(rows))[:, None]
    c = np.ceil(cdf, out=cdf).astype(np.int64).reshape(-1)
    counts = np.empty_like(c)
    counts[0] = c[0]
    np.subtract(c[1:], c[:-1], out=counts[1:])
    idx = np.repeat(_tiled_arange(rows, n), counts)
    return idx.reshape(weights.shape)


def maybe_resample(positions: np.ndarray, weights: np.ndarray, resample_threshold: float,
                   rng: np.random.Generator):
    """Resample one set if ``N_eff < resample_threshold * N``.

    Returns ``(positions, weights, resampled)``.
    """
    n = weights.shape[-1]
    if effective_sample_size(weights) >= resample_threshold * n:
        return positions, weights, False
    idx = systematic_resample(weights, rng)
    return positions[idx], np.full(n, 1.0 / n), True


def estimate_position(positions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.matmul(weights[..., None, :], positions)[..., 0, :]


# ---------------------------------------------------------------------------
# one filter cycle


@dataclass
class TrackState:
    """Particle sets of all markers; ``positions`` is ``(L, N, 2)``."""

    positions: np.ndarray
    weights: np.ndarray
    estimates: np.ndarray
    cycle: int = 0
    noise: Optional[NoiseTable] = field(default=None, repr=False)
    _scratch: np.ndarray = field(default=None, repr=False)

    @classmethod
    def initial(cls, n_markers: int, n_particles: int, rng: np.random.Generator) -> "TrackState":
        pos = init_particles(n_particles, rng, n_markers)
        w = np.full((n_markers, n_particles), 1.0 / n_particles)
        # 128 cycles' worth keeps overlap between successive slices rare
        noise = NoiseTable(max(1 << 16, 128 * pos.size), rng)
        return cls(pos, w, estimate_position(pos, w), noise=noise)

    def scratch(self) -> np.ndarray:
        if self._scratch is None:
            self._scratch = np.zeros((self.positions.shape[0], N_PIXELS))
        return self._scratch


@dataclass(frozen=True)
class CycleInfo:
    n_eff: np.ndarray
    reselected: np.ndarray
    resampled: np.ndarray
    degenerate: np.ndarray


def _cycle(state: TrackState, up: np.ndarray, et_sparse: np.ndarray, thresholds: np.ndarray,
           cfg: FilterConfig, rng: np.random.Generator) -> CycleInfo:
    """Advance all particle sets one cycle, in place.

    ``up`` are the flat pixel indices carrying evidence and ``et_sparse`` the
    (already gated) evidence there, shape ``(L, U)``.
    """
    L, N = state.weights.shape
    buf = state.scratch()
    buf[:, up] = et_sparse
    flat = buf.reshape(-1)
    row_off = (np.arange(L) * N_PIXELS)[:, None]

    pos = propagate(state.positions, cfg.proposal_sigma, rng, state.noise)
    pix = _nearest_pixel(pos)
    pix += row_off
    et = flat.take(pix)
    weights = state.weights.copy()

    has_map = et_sparse.sum(axis=1) > 0 if up.size else np.zeros(L, dtype=bool)
    reselected = check_reselect(et, thresholds)
    for l in np.flatnonzero(reselected & has_map):
        pick = up[_draw_pixels(up, et_sparse[l], N, rng)]
        pos[l, :, 0] = pick % WIDTH
        pos[l, :, 1] = pick // WIDTH
        et[l] = buf[l, pick]
        weights[l] = 1.0 / N
    buf[:, up] = 0.0

    et = normalize(et)
    es = np.full((L, N), 1.0 / N)
    if has_map.any():
        m = np.flatnonzero(has_map)
        mean, cov = fit_gaussian(None, et_sparse[m], cfg.cov_eps, basis=_PIXEL_MOMENTS[up])
        es[m] = spatial_evidence(pos[m], mean, cov)

    weights, degenerate = update_weights(weights, et, es, cfg.alpha)
    n_eff = effective_sample_size(weights)
    resampled = n_eff < cfg.resample_threshold * N
    if resampled.any():
        r = np.flatnonzero(resampled)
        idx = systematic_resample(weights[r], rng)
        idx += (r * N)[:, None]
        pos[r] = pos.reshape(L * N, 2).take(idx, axis=0)
        weights[r] = 1.0 / N

    state.positions = pos
    state.weights = weights
    state.estimates = estimate_position(pos, weights)
    state.cycle += 1
    return CycleInfo(n_eff, reselected, resampled, degenerate)


def track_cycle(state: TrackState, window: WindowView, markers: Sequence[MarkerSpec],
                cfg: FilterConfig = FilterConfig(),
                rng: Optional[np.random.Generator] = None) -> tuple[TrackState, CycleInfo]:
    """Run one filter cycle for every marker on a window.

    Returns a new :class:`TrackState` (the input is not modified) and the
    per-marker cycle diagnostics.
    """
    rng = np.random.default_rng() if rng is None else rng
    iv = window.intervals
    pix = iv["y"].astype(np.int64) * WIDTH + iv["x"]
    tri = np.stack([triangle_pdf(iv["delta"], m.period_us, m.sigma_us) for m in markers]) \
        if len(iv) else np.zeros((len(markers), 0))
    counts = window.event_counts().ravel()
    up, et_sparse = _sparse_evidence(pix, tri, lambda p: counts[p], cfg.min_events_per_pixel)
    new = TrackState(state.positions.copy(), state.weights.copy(), state.estimates.copy(), state.cycle,
                     state.noise)
    info = _cycle(new, up, et_sparse, cfg.reselect_thresholds(markers), cfg, rng)
    return new, info


# ---------------------------------------------------------------------------
# estimator


class SMPTracker(BaseEstimator):
    """Track frequency-coded LED markers through an event stream.

    Parameters
    ----------
    periods_us : sequence of float
        Blink period of each marker; marker ids are 1-based in this order.
    period_sigma_us : float
        Period spread; the triangle likelihood spans +-2.5 sigma.
    alpha : float
        Weight of spatial relative to temporal evidence.  ``0`` gives the
        temporal-only baseline.
    proposal_sigma : float
        Random-walk step (px) per cycle.
    reselect_threshold : float or None
        Evidence sum below which a set is redrawn; default 10 peak hits.
    resample_threshold : float
        Resample when ``N_eff`` falls below this fraction of ``n_particles``.
    min_events_per_pixel : int
        Pixels with fewer raw events in the window carry no evidence.
    n_particles, window_us, step_us, cov_eps
        See :class:`FilterConfig`.
    random_state : int or None
        Seed for the particle random source.

    Attributes
    ----------
    trajectory_ : ndarray of shape (n_cycles, n_markers, 2)
        Tracked (x, y) per cycle.
    cycle_times_ : ndarray of shape (n_cycles,)
        End time (us) of each cycle's window.
    n_eff_, reselected_, resampled_, degenerate_ : ndarray (n_cycles, n_markers)
    """

    def __init__(self, periods_us=DEFAULT_PERIODS_US, period_sigma_us=DEFAULT_PERIOD_SIGMA_US,
                 alpha=1.0, proposal_sigma=2.0, reselect_threshold=None, resample_threshold=0.5,
                 min_events_per_pixel=3, n_particles=1000, window_us=10_000, step_us=1_000,
                 cov_eps=1e-6, random_state=None):
        self.periods_us = periods_us
        self.period_sigma_us = period_sigma_us
        self.alpha = alpha
        self.proposal_sigma = proposal_sigma
        self.reselect_threshold = reselect_threshold
        self.resample_threshold = resample_threshold
        self.min_events_per_pixel = min_events_per_pixel
        self.n_particles = n_particles
        self.window_us = window_us
        self.step_us = step_us
        self.cov_eps = cov_eps
        self.random_state = random_state

    def _config(self) -> tuple[list[MarkerSpec], FilterConfig]:
        markers = default_markers(self.periods_us, self.period_sigma_us)
        check_markers(markers)
        cfg = FilterConfig(
            alpha=self.alpha, proposal_sigma=self.proposal_sigma,
            reselect_threshold=self.reselect_threshold,
            resample_threshold=self.resample_threshold,
            min_events_per_pixel=self.min_events_per_pixel, n_particles=self.n_particles,
            window_us=self.window_us, step_us=self.step_us, cov_eps=self.cov_eps,
        )
        return markers, cfg

    def fit(self, X: np.ndarray, y=None, intervals: Optional[np.ndarray] = None,
            stop_us: Optional[int] = None):
        """Track through the event stream ``X`` (``EVENT_DTYPE``, time-ordered).

        Cycle ``k`` uses the window ``[k * step_us, k * step_us + window_us)``;
        cycles run while the window end is at most ``stop_us`` (default: the
        last event time + 1), with at least one cycle.
        """
        markers, cfg = self._config()
        X = np.asarray(X, dtype=EVENT_DTYPE)
        rng = np.random.default_rng(self.random_state)
        if intervals is None:
            intervals = compute_intervals(X)
        if stop_us is None:
            stop_us = int(X["t"][-1]) + 1 if len(X) else cfg.window_us
        n_cycles = max(1, (stop_us - cfg.window_us) // cfg.step_us + 1)

        L, N = len(markers), cfg.n_particles
        thresholds = cfg.reselect_thresholds(markers)
        iv_t = intervals["t"].astype(np.int64)
        iv_pix = intervals["y"].astype(np.int64) * WIDTH + intervals["x"]
        tri = np.stack([triangle_pdf(intervals["delta"], m.period_us, m.sigma_us) for m in markers])
        # raw-event counts per (pixel, window) via a (pixel, time) sorted key
        ev_key = (X["y"].astype(np.int64) * WIDTH + X["x"]) << 40 | X["t"].astype(np.int64)
        ev_key.sort()

        starts = np.arange(n_cycles, dtype=np.int64) * cfg.step_us
        bounds = np.searchsorted(iv_t, np.stack([starts, starts + cfg.window_us]))

        state = TrackState.initial(L, N, rng)
        traj = np.empty((n_cycles, L, 2))
        n_eff = np.empty((n_cycles, L))
        flags = np.empty((3, n_cycles, L), dtype=bool)
        for k in range(n_cycles):
            s = starts[k]
            i0, i1 = bounds[0, k], bounds[1, k]

            def counts_at(p, s=s):
                base = p << 40
                return np.searchsorted(ev_key, base | (s + cfg.window_us)) - np.searchsorted(ev_key, base | s)

            up, et_sparse = _sparse_evidence(iv_pix[i0:i1], tri[:, i0:i1], counts_at,
                                             cfg.min_events_per_pixel)
            info = _cycle(state, up, et_sparse, thresholds, cfg, rng)
            traj[k] = state.estimates
            n_eff[k] = info.n_eff
            flags[0, k], flags[1, k], flags[2, k] = info.reselected, info.resampled, info.degenerate

        self.markers_ = markers
        self.trajectory_ = traj
        self.cycle_times_ = starts + cfg.window_us
        self.n_eff_ = n_eff
        self.reselected_, self.resampled_, self.degenerate_ = flags
        self.state_ = state
        return self

    def predict(self, t_us) -> np.ndarray:
        """Tracked positions of the last cycle ending at or before each time."""
        check_is_fitted(self, "trajectory_")
        t = np.atleast_1d(np.asarray(t_us, dtype=np.int64))
        k = np.searchsorted(self.cycle_times_, t, side="right") - 1
        if np.any(k < 0):
            raise ValueError("query time precedes the first completed cycle")
        return self.trajectory_[k]

    def track_log(self) -> np.ndarray:
        """One record per marker per cycle (``LOG_DTYPE``)."""
        check_is_fitted(self, "trajectory_")
        K, L, _ = self.trajectory_.shape
        log = np.empty(K * L, dtype=LOG_DTYPE)
        log["cycle"] = np.repeat(np.arange(K), L)
        log["t_us"] = np.repeat(self.cycle_times_, L)
        log["marker_id"] = np.tile([m.id for m in self.markers_], K)
        log["x"] = self.trajectory_[..., 0].ravel()
        log["y"] = self.trajectory_[..., 1].ravel()
        log["n_eff"] = self.n_eff_.ravel()
        log["reselected"] = self.reselected_.ravel()
        log["resampled"] = self.resampled_.ravel()
        return log


# ---------------------------------------------------------------------------
# track log files

LOG_COLUMNS = list(LOG_DTYPE.names)


def write_track_log(path, log: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in log.tolist():
            w.writerow([r[0], r[1], r[2], repr(r[3]), repr(r[4]), repr(r[5]), int(r[6]), int(r[7])])


def read_track_log(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LOG_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(LOG_COLUMNS)}")
        rows = [(int(r[0]), int(r[1]), int(r[2]), float(r[3]), float(r[4]), float(r[5]),
                 bool(int(r[6])), bool(int(r[7]))) for r in reader if r]
    return np.array(rows, dtype=LOG_DTYPE) if rows else np.empty(0, dtype=LOG_DTYPE)


def log_to_trajectory(log: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reshape a track log into ``(times (K,), marker_ids (L,), positions (K, L, 2))``.

    Cycles missing a marker are dropped.
    """
    ids = np.unique(log["marker_id"])
    times = np.unique(log["t_us"])
    pos = np.full((times.size, ids.size, 2), np.nan)
    ti = np.searchsorted(times, log["t_us"])
    mi = np.searchsorted(ids, log["marker_id"])
    pos[ti, mi, 0] = log["x"]
    pos[ti, mi, 1] = log["y"]
    ok = ~np.isnan(pos).any(axis=(1, 2))
    return times[ok], ids, pos[ok]


def failure_cycles(trajectory: np.ndarray, distance: float = 2.0) -> int:
    """Longest run of consecutive cycles in which any two markers are within ``distance`` px."""
    K, L, _ = trajectory.shape
    close = np.zeros(K, dtype=bool)
    for a in range(L):
        for b in range(a + 1, L):
            close |= np.linalg.norm(trajectory[:, a] - trajectory[:, b], axis=-1) < distance
    best = run = 0
    for c in close.tolist():
        run = run + 1 if c else 0
        best = max(best, run)
    return best


def is_failure(trajectory: np.ndarray, distance: float = 2.0, min_cycles: int = 100) -> bool:
    return failure_cycles(trajectory, distance) > min_cycles
