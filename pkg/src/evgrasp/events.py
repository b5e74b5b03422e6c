"""Event ingestion and the events -> states -> transitions -> intervals pipeline.

Events are held in numpy structured arrays (``EVENT_DTYPE``) so that whole
streams can be sliced and processed without per-event Python objects.  The
per-event reference path (:class:`PixelStateGrid`, :func:`apply_event`,
:func:`interval_of`) and the vectorised :func:`compute_intervals` produce the
same intervals in the same order.
"""

from __future__ import annotations

import enum
import io
import os
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, NamedTuple, Optional, Union

import numpy as np

WIDTH = 240
HEIGHT = 180
N_PIXELS = WIDTH * HEIGHT

BINARY_MAGIC = b"EVGRSP01"
REORDER_TOLERANCE_US = 1_000

# packed little-endian record: u64 t, u16 x, u16 y, u8 polarity (13 bytes)
EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
INTERVAL_DTYPE = np.dtype(
    [("t", "<i8"), ("delta", "<i8"), ("kind", "u1"), ("x", "<u2"), ("y", "<u2")]
)


class EventFormatError(ValueError):
    """Malformed record in an event file."""

    def __init__(self, message: str, line: Optional[int] = None, offset: Optional[int] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.offset = offset


class EventBoundsError(ValueError):
    """Event coordinates outside the 240x180 sensor."""


class EventOrderError(ValueError):
    """Timestamps regress by more than the reorder tolerance."""


class ConfigError(ValueError):
    """Invalid processing parameters."""


class Polarity(enum.IntEnum):
    OFF = 0
    ON = 1


class PixelState(enum.IntEnum):
    MINUS = -1
    UNKNOWN = 0
    PLUS = 1


class Kind(enum.IntEnum):
    N = 0
    P = 1


class Event(NamedTuple):
    t: int
    x: int
    y: int
    polarity: Polarity


class Transition(NamedTuple):
    t: int
    kind: Kind
    x: int
    y: int


class TransitionInterval(NamedTuple):
    t: int
    delta: int
    kind: Kind
    x: int
    y: int


def make_events(t, x, y, p) -> np.ndarray:
    """Build an ``EVENT_DTYPE`` array from column sequences (no validation)."""
    t = np.asarray(t)
    out = np.empty(t.shape[0], dtype=EVENT_DTYPE)
    out["t"] = t
    out["x"] = x
    out["y"] = y
    out["p"] = p
    return out


def check_events(events: np.ndarray, reorder_tolerance_us: int = REORDER_TOLERANCE_US) -> np.ndarray:
    """Validate bounds and ordering; return a time-ordered copy if needed.

    Small timestamp regressions (hardware jitter up to ``reorder_tolerance_us``)
    are repaired by a stable sort.  Larger ones raise :class:`EventOrderError`.
    """
    if events.dtype != EVENT_DTYPE:
        events = events.astype(EVENT_DTYPE)
    if len(events) == 0:
        return events
    bad_x = np.flatnonzero(events["x"] >= WIDTH)
    bad_y = np.flatnonzero(events["y"] >= HEIGHT)
    if bad_x.size or bad_y.size:
        i = int(min(bad_x[:1].tolist() + bad_y[:1].tolist()))
        e = events[i]
        raise EventBoundsError(
            f"event {i} at ({int(e['x'])}, {int(e['y'])}) outside {WIDTH}x{HEIGHT} sensor"
        )
    if np.any(events["p"] > 1):
        i = int(np.flatnonzero(events["p"] > 1)[0])
        raise EventBoundsError(f"event {i} has polarity {int(events['p'][i])}, expected 0 or 1")
    t = events["t"].astype(np.int64)
    regression = np.maximum.accumulate(t) - t
    if regression.max() > reorder_tolerance_us:
        i = int(np.argmax(regression > reorder_tolerance_us))
        raise EventOrderError(
            f"timestamp at event {i} regresses by {int(regression[i])} us "
            f"(tolerance {reorder_tolerance_us} us)"
        )
    if regression.max() > 0:
        events = events[np.argsort(t, kind="stable")]
    return events


# ---------------------------------------------------------------------------
# file formats


def _parse_csv(text: str) -> np.ndarray:
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventFormatError(f"expected 4 fields, got {len(parts)}", line=lineno)
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise EventFormatError(f"non-integer field in {line!r}", line=lineno) from None
        if t < 0 or x < 0 or y < 0:
            raise EventFormatError("negative field", line=lineno)
        if p not in (0, 1):
            raise EventFormatError(f"polarity must be 0 or 1, got {p}", line=lineno)
        if x >= WIDTH or y >= HEIGHT:
            raise EventBoundsError(
                f"line {lineno}: ({x}, {y}) outside {WIDTH}x{HEIGHT} sensor"
            )
        rows.append((t, x, y, p))
    if not rows:
        return np.empty(0, dtype=EVENT_DTYPE)
    arr = np.array(rows, dtype=np.int64)
    return make_events(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


def _parse_binary(data: bytes) -> np.ndarray:
    if len(data) < len(BINARY_MAGIC) or data[: len(BINARY_MAGIC)] != BINARY_MAGIC:
        raise EventFormatError("missing EVGRSP01 header", offset=0)
    body = memoryview(data)[len(BINARY_MAGIC):]
    rem = len(body) % EVENT_DTYPE.itemsize
    if rem:
        offset = len(data) - rem
        raise EventFormatError("truncated trailing record", offset=offset)
    events = np.frombuffer(body, dtype=EVENT_DTYPE).copy()
    bad = np.flatnonzero(events["p"] > 1)
    if bad.size:
        offset = len(BINARY_MAGIC) + int(bad[0]) * EVENT_DTYPE.itemsize
        raise EventFormatError(f"polarity {int(events['p'][bad[0]])} not in {{0, 1}}", offset=offset)
    return events


def ingest(
    source: Union[bytes, BinaryIO],
    fmt: str = "csv",
    reorder_tolerance_us: int = REORDER_TOLERANCE_US,
) -> np.ndarray:
    """Parse an event byte stream.

    Parameters
    ----------
    source : bytes or binary file object
        Raw file contents.
    fmt : {"csv", "bin"}
        ``csv``: one ``t_us,x,y,polarity`` record per line.  ``bin``: the
        ``EVGRSP01`` header followed by packed 13-byte little-endian records.
    reorder_tolerance_us : int
        Largest timestamp regression repaired by a stable sort.

    Returns
    -------
    numpy.ndarray
        ``EVENT_DTYPE`` array in non-decreasing timestamp order.
    """
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    if fmt == "csv":
        try:
            text = bytes(data).decode("ascii")
        except UnicodeDecodeError as exc:
            raise EventFormatError("non-ASCII content in CSV", offset=exc.start) from None
        events = _parse_csv(text)
    elif fmt == "bin":
        events = _parse_binary(bytes(data))
    else:
        raise ConfigError(f"unknown event format {fmt!r}")
    return check_events(events, reorder_tolerance_us)


def guess_format(path: Union[str, os.PathLike]) -> str:
    with open(path, "rb") as fh:
        head = fh.read(len(BINARY_MAGIC))
    return "bin" if head == BINARY_MAGIC else "csv"


def read_events(path, fmt: Optional[str] = None, reorder_tolerance_us: int = REORDER_TOLERANCE_US) -> np.ndarray:
    fmt = fmt or guess_format(path)
    with open(path, "rb") as fh:
        return ingest(fh, fmt, reorder_tolerance_us)


def dumps_events(events: np.ndarray, fmt: str = "csv") -> bytes:
    events = np.asarray(events, dtype=EVENT_DTYPE)
    if fmt == "bin":
        return BINARY_MAGIC + events.tobytes()
    if fmt != "csv":
        raise ConfigError(f"unknown event format {fmt!r}")
    buf = io.StringIO()
    cols = np.stack(
        [events["t"].astype(np.uint64), events["x"], events["y"], events["p"]], axis=1
    ) if len(events) else np.empty((0, 4), dtype=np.uint64)
    np.savetxt(buf, cols, fmt="%d", delimiter=",")
    return buf.getvalue().encode("ascii")


def write_events(path, events: np.ndarray, fmt: Optional[str] = None) -> None:
    if fmt is None:
        fmt = "bin" if str(path).endswith((".bin", ".evb")) else "csv"
    with open(path, "wb") as fh:
        fh.write(dumps_events(events, fmt))


# ---------------------------------------------------------------------------
# per-event reference pipeline


@dataclass
class PixelStateGrid:
    """Per-pixel lighting state and last transition times.

    ``last[k]`` holds the latest transition time of kind ``k`` at each pixel
    (-1 for none); ``prev[k]`` the one before it, which is what
    :func:`interval_of` differences against.
    """

    state: np.ndarray = field(default_factory=lambda: np.zeros((HEIGHT, WIDTH), dtype=np.int8))
    last: np.ndarray = field(default_factory=lambda: np.full((2, HEIGHT, WIDTH), -1, dtype=np.int64))
    prev: np.ndarray = field(default_factory=lambda: np.full((2, HEIGHT, WIDTH), -1, dtype=np.int64))
    latest_t: int = -1


def apply_event(grid: PixelStateGrid, e: Event) -> Optional[Transition]:
    """Update the pixel state; return the transition if the state changed."""
    t, x, y, pol = int(e[0]), int(e[1]), int(e[2]), int(e[3])
    if not (0 <= x < WIDTH and 0 <= y < HEIGHT):
        raise EventBoundsError(f"({x}, {y}) outside {WIDTH}x{HEIGHT} sensor")
    grid.latest_t = max(grid.latest_t, t)
    new = PixelState.PLUS if pol == Polarity.ON else PixelState.MINUS
    old = grid.state[y, x]
    grid.state[y, x] = new
    if old == PixelState.UNKNOWN or old == new:
        return None
    kind = Kind.P if new == PixelState.PLUS else Kind.N
    grid.prev[kind, y, x] = grid.last[kind, y, x]
    grid.last[kind, y, x] = t
    return Transition(t, kind, x, y)


def interval_of(grid: PixelStateGrid, tr: Transition) -> Optional[TransitionInterval]:
    """Interval since the previous same-kind transition at the pixel.

    Zero-length intervals (several transitions sharing one timestamp) are
    dropped so that every emitted delta is positive.
    """
    before = int(grid.prev[tr.kind, tr.y, tr.x])
    if before < 0:
        return None
    delta = tr.t - before
    if delta <= 0:
        return None
    return TransitionInterval(tr.t, delta, tr.kind, tr.x, tr.y)


def intervals_by_replay(events: np.ndarray) -> np.ndarray:
    """Run the per-event reference path over a stream (slow; for checking)."""
    grid = PixelStateGrid()
    out = []
    for e in events.tolist():
        tr = apply_event(grid, e)
        if tr is not None:
            iv = interval_of(grid, tr)
            if iv is not None:
                out.append(tuple(iv))
    return np.array(out, dtype=INTERVAL_DTYPE) if out else np.empty(0, dtype=INTERVAL_DTYPE)


# ---------------------------------------------------------------------------
# vectorised pipeline


def compute_intervals(events: np.ndarray) -> np.ndarray:
    """All transition intervals of a time-ordered stream, in emission order."""
    n = len(events)
    if n < 2:
        return np.empty(0, dtype=INTERVAL_DTYPE)
    pix = events["y"].astype(np.int64) * WIDTH + events["x"]
    # stable: within a pixel, stream order is kept
    order = np.argsort(pix, kind="stable")
    sp = pix[order]
    pol = events["p"][order]
    is_tr = np.zeros(n, dtype=bool)
    is_tr[1:] = (sp[1:] == sp[:-1]) & (pol[1:] != pol[:-1])
    tr_idx = order[is_tr]
    key = sp[is_tr] * 2 + pol[is_tr]  # kind P == polarity ON
    o2 = np.argsort(key, kind="stable")
    key = key[o2]
    tr_idx = tr_idx[o2]
    t = events["t"][tr_idx].astype(np.int64)
    delta = t[1:] - t[:-1]
    keep = (key[1:] == key[:-1]) & (delta > 0)
    src = tr_idx[1:][keep]
    delta = delta[keep]
    emit = np.argsort(src, kind="stable")
    src = src[emit]
    out = np.empty(src.shape[0], dtype=INTERVAL_DTYPE)
    out["t"] = events["t"][src]
    out["delta"] = delta[emit]
    out["kind"] = events["p"][src]
    out["x"] = events["x"][src]
    out["y"] = events["y"][src]
    return out


# ---------------------------------------------------------------------------
# sliding windows


@dataclass(frozen=True)
class WindowView:
    """Intervals and raw events with ``start <= t < start + length``."""

    start: int
    length: int
    step: int
    intervals: np.ndarray
    events: np.ndarray

    @property
    def stop(self) -> int:
        return self.start + self.length

    def event_counts(self) -> np.ndarray:
        """Raw events per pixel, shape ``(HEIGHT, WIDTH)``."""
        pix = self.events["y"].astype(np.int64) * WIDTH + self.events["x"]
        return np.bincount(pix, minlength=N_PIXELS).reshape(HEIGHT, WIDTH)


def check_window_params(length: int, step: int) -> None:
    if step <= 0:
        raise ConfigError(f"window step must be positive, got {step}")
    if length <= 0:
        raise ConfigError(f"window length must be positive, got {length}")
    if step > length:
        raise ConfigError(f"window step {step} exceeds window length {length}")


def windows(
    events: np.ndarray,
    intervals: Optional[np.ndarray] = None,
    length: int = 10_000,
    step: int = 1_000,
    start: int = 0,
    stop: Optional[int] = None,
) -> Iterator[WindowView]:
    """Slide a window of ``length`` us by ``step`` us over a stream.

    Window ``k`` covers ``[start + k*step, start + k*step + length)``.  Windows
    are emitted while their start is before ``stop`` (default: one past the
    last event), including windows that hold no intervals.
    """
    check_window_params(length, step)
    if intervals is None:
        intervals = compute_intervals(events)
    if stop is None:
        if len(events) == 0:
            return
        stop = int(events["t"][-1]) + 1
    ev_t = events["t"].astype(np.int64)
    iv_t = intervals["t"].astype(np.int64)
    s = start
    while s < stop:
        e0, e1 = np.searchsorted(ev_t, [s, s + length])
        i0, i1 = np.searchsorted(iv_t, [s, s + length])
        yield WindowView(s, length, step, intervals[i0:i1], events[e0:e1])
        s += step
