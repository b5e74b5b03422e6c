"""Event-window to 8-bit frame encoders: event frequency, SAE and LIF.

Each ``encode_*`` function is a pure function of one window of events.  The
estimator classes slide a window over a whole stream and stack the frames,
so they can sit in an sklearn pipeline.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .events import EVENT_DTYPE, HEIGHT, N_PIXELS, WIDTH, check_window_params

FREQ = "FREQ"
SAE = "SAE"
LIF = "LIF"

DEFAULT_WINDOW_US = 20_000


@dataclass(frozen=True)
class EventFrame:
    pixels: np.ndarray  # (HEIGHT, WIDTH) uint8
    encoder: str
    start: int
    length: int


@dataclass(frozen=True)
class MergedFrame:
    pixels: np.ndarray  # (HEIGHT, WIDTH, 3) uint8, channels R=freq, G=sae, B=lif
    start: int
    length: int


@dataclass(frozen=True)
class LifConfig:
    step_increase: float = 1.0
    decay_rate: float = 0.1  # MP units per ms
    threshold: float = 1.5

    def __post_init__(self):
        for name in ("step_increase", "decay_rate", "threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"LifConfig.{name} must be strictly positive")


def _range_table(size: int = 64) -> np.ndarray:
    # decimal at 50 digits, then float(): correctly rounded for every entry
    import decimal

    ctx = decimal.Context(prec=50)
    half = decimal.Decimal("0.5")
    out = []
    for n in range(size):
        sig = ctx.divide(1, ctx.add(1, ctx.exp(-n)))
        out.append(float(ctx.multiply(510, ctx.subtract(sig, half))))
    return np.array(out)


_RANGE_TABLE = _range_table()


def range_normalize(n) -> np.ndarray:
    """``255 * 2 * (1 / (1 + exp(-n)) - 0.5)`` before rounding.

    Integer counts below 64 come from a correctly rounded table; larger or
    fractional arguments use ``255 * tanh(n / 2)``.
    """
    n = np.asarray(n)
    out = 255.0 * np.tanh(n.astype(np.float64) / 2.0)
    if np.issubdtype(n.dtype, np.integer):
        small = (n >= 0) & (n < _RANGE_TABLE.size)
        out = np.where(small, _RANGE_TABLE[np.clip(n, 0, _RANGE_TABLE.size - 1)], out)
    return out


def to_uint8(values) -> np.ndarray:
    """Round half away from zero, then clamp to [0, 255]."""
    v = np.asarray(values, dtype=np.float64)
    r = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(r, 0, 255).astype(np.uint8)


def _pixel_index(events: np.ndarray) -> np.ndarray:
    return events["y"].astype(np.int64) * WIDTH + events["x"]


def event_counts(events: np.ndarray) -> np.ndarray:
    return np.bincount(_pixel_index(events), minlength=N_PIXELS).reshape(HEIGHT, WIDTH)


def encode_frequency(events: np.ndarray, start: int = 0, length: int = DEFAULT_WINDOW_US) -> EventFrame:
    counts = event_counts(events)
    return EventFrame(to_uint8(range_normalize(counts)), FREQ, start, length)


def encode_sae(events: np.ndarray, start: int, length: int) -> EventFrame:
    """Surface of active events scaled by ``255 * (t_p - start) / length``.

    ``t_p`` is the latest timestamp at each pixel; pixels without events are 0.
    """
    if length <= 0:
        raise ValueError("window length must be positive")
    t = events["t"].astype(np.int64)
    if len(t) and (t.min() < start or t.max() >= start + length):
        raise ValueError(f"events fall outside window [{start}, {start + length})")
    latest = np.full(N_PIXELS, -1, dtype=np.int64)
    np.maximum.at(latest, _pixel_index(events), t)
    seen = latest >= 0
    values = np.zeros(N_PIXELS, dtype=np.float64)
    values[seen] = 255.0 * (latest[seen] - start) / length
    return EventFrame(to_uint8(values).reshape(HEIGHT, WIDTH), SAE, start, length)


def lif_fire_counts(events: np.ndarray, cfg: LifConfig = LifConfig()) -> np.ndarray:
    """Firing count per pixel of a linearly leaking integrate-and-fire neuron.

    Membrane potential starts at 0 for the window, leaks ``decay_rate`` per ms
    (never below 0), gains ``step_increase`` per event and is reset to 0 when
    it exceeds ``threshold``.
    """
    mp = np.zeros(N_PIXELS)
    last = np.zeros(N_PIXELS, dtype=np.int64)
    fired = np.zeros(N_PIXELS, dtype=np.int64)
    step, decay, thr = cfg.step_increase, cfg.decay_rate, cfg.threshold
    pix = _pixel_index(events).tolist()
    ts = events["t"].astype(np.int64).tolist()
    # plain lists are much faster than numpy scalars in this loop
    mp_l = mp.tolist()
    last_l = last.tolist()
    fired_l = fired.tolist()
    for i, t in zip(pix, ts):
        v = mp_l[i] - decay * (t - last_l[i]) / 1000.0
        if v < 0.0:
            v = 0.0
        v += step
        if v > thr:
            fired_l[i] += 1
            v = 0.0
        mp_l[i] = v
        last_l[i] = t
    return np.asarray(fired_l, dtype=np.int64).reshape(HEIGHT, WIDTH)


def encode_lif(
    events: np.ndarray,
    cfg: LifConfig = LifConfig(),
    start: int = 0,
    length: int = DEFAULT_WINDOW_US,
) -> EventFrame:
    n = lif_fire_counts(events, cfg)
    return EventFrame(to_uint8(range_normalize(n)), LIF, start, length)


def merge(freq: EventFrame, sae: EventFrame, lif: EventFrame) -> MergedFrame:
    """Stack three frames of one window as R=frequency, G=SAE, B=LIF."""
    for frame, tag in ((freq, FREQ), (sae, SAE), (lif, LIF)):
        if frame.encoder != tag:
            raise ValueError(f"expected a {tag} frame, got {frame.encoder}")
    windows = {(f.start, f.length) for f in (freq, sae, lif)}
    if len(windows) != 1:
        raise ValueError(f"frames cover different windows: {sorted(windows)}")
    pixels = np.stack([freq.pixels, sae.pixels, lif.pixels], axis=-1)
    return MergedFrame(pixels, freq.start, freq.length)


# ---------------------------------------------------------------------------
# frame files


def frame_filename(prefix: str, start: int, ext: str) -> str:
    return f"{prefix}_{start:012d}.{ext}"


def write_pgm(path, frame: EventFrame) -> None:
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (WIDTH, HEIGHT))
        fh.write(np.ascontiguousarray(frame.pixels, dtype=np.uint8).tobytes())


def write_ppm(path, frame: MergedFrame) -> None:
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (WIDTH, HEIGHT))
        fh.write(np.ascontiguousarray(frame.pixels, dtype=np.uint8).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM written by :func:`write_pgm` / :func:`write_ppm`."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if int(maxval) != 255:
        raise ValueError("only 8-bit PNM files are supported")
    channels = {b"P5": 1, b"P6": 3}[magic]
    arr = np.frombuffer(rest, dtype=np.uint8, count=w * h * channels)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# sklearn-style stream encoders


def iter_windows(events: np.ndarray, window_us: int, step_us: int, start: int = 0,
                 stop: Optional[int] = None) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(window_start, events_in_window)`` pairs."""
    check_window_params(window_us, step_us)
    if stop is None:
        if len(events) == 0:
            return
        stop = int(events["t"][-1]) + 1
    t = events["t"].astype(np.int64)
    s = start
    while s < stop:
        i0, i1 = np.searchsorted(t, [s, s + window_us])
        yield s, events[i0:i1]
        s += step_us


class _StreamEncoder(TransformerMixin, BaseEstimator):
    """Slides a window over an event stream and encodes each window."""

    def __init__(self, window_us: int = DEFAULT_WINDOW_US, step_us: int = DEFAULT_WINDOW_US,
                 start_us: int = 0):
        self.window_us = window_us
        self.step_us = step_us
        self.start_us = start_us

    def fit(self, X=None, y=None):
        check_window_params(self.window_us, self.step_us)
        return self

    def encode_window(self, events: np.ndarray, start: int):
        raise NotImplementedError

    def iter_frames(self, X: np.ndarray):
        X = np.asarray(X, dtype=EVENT_DTYPE)
        for s, ev in iter_windows(X, self.window_us, self.step_us, self.start_us):
            yield self.encode_window(ev, s)

    def transform(self, X: np.ndarray) -> np.ndarray:
        """Frames for every window, stacked along axis 0."""
        frames = [f.pixels for f in self.iter_frames(X)]
        if not frames:
            return np.empty((0, HEIGHT, WIDTH) + self._channel_shape, dtype=np.uint8)
        return np.stack(frames)

    _channel_shape: tuple = ()


class FrequencyEncoder(_StreamEncoder):
    def encode_window(self, events, start):
        return encode_frequency(events, start, self.window_us)


class SAEEncoder(_StreamEncoder):
    def encode_window(self, events, start):
        return encode_sae(events, start, self.window_us)


class LIFEncoder(_StreamEncoder):
    def __init__(self, window_us: int = DEFAULT_WINDOW_US, step_us: int = DEFAULT_WINDOW_US,
                 start_us: int = 0, step_increase: float = 1.0, decay_rate: float = 0.1,
                 threshold: float = 1.5):
        super().__init__(window_us, step_us, start_us)
        self.step_increase = step_increase
        self.decay_rate = decay_rate
        self.threshold = threshold

    @property
    def lif_config(self) -> LifConfig:
        return LifConfig(self.step_increase, self.decay_rate, self.threshold)

    def fit(self, X=None, y=None):
        super().fit(X, y)
        self.lif_config  # validates
        return self

    def encode_window(self, events, start):
        return encode_lif(events, self.lif_config, start, self.window_us)


class MergedEncoder(LIFEncoder):
    """Three-channel frames with R=frequency, G=SAE, B=LIF."""

    _channel_shape = (3,)

    def encode_window(self, events, start):
        return merge(
            encode_frequency(events, start, self.window_us),
            encode_sae(events, start, self.window_us),
            encode_lif(events, self.lif_config, start, self.window_us),
        )


ENCODERS = {
    "freq": FrequencyEncoder,
    "sae": SAEEncoder,
    "lif": LIFEncoder,
    "merged": MergedEncoder,
}


def save_frame(out_dir, frame) -> str:
    if isinstance(frame, MergedFrame):
        name = frame_filename("merged", frame.start, "ppm")
        write_ppm(os.path.join(out_dir, name), frame)
    else:
        name = frame_filename(frame.encoder.lower(), frame.start, "pgm")
        write_pgm(os.path.join(out_dir, name), frame)
    return name
