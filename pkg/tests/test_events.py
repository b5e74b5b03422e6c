import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evgrasp.events import (
    BINARY_MAGIC, EVENT_DTYPE, HEIGHT, INTERVAL_DTYPE, WIDTH, ConfigError, Event, EventBoundsError, EventFormatError,
    EventOrderError, Kind, PixelState, PixelStateGrid, Transition, apply_event, compute_intervals,
    dumps_events, ingest, interval_of, intervals_by_replay, make_events, read_events, windows,
    write_events,
)
from oracles import brute_intervals


def as_tuples(iv):
    return [tuple(int(v) for v in r) for r in iv.tolist()]


# ---------------------------------------------------------------------------
# ingest


def test_csv_line_maps_fields():
    ev = ingest(b"1000,5,7,1\n")
    assert ev.dtype == EVENT_DTYPE
    assert ev.tolist() == [(1000, 5, 7, 1)]


def test_csv_out_of_bounds_x():
    with pytest.raises(EventBoundsError):
        ingest(b"1000,240,7,1\n")


def test_csv_out_of_bounds_y():
    with pytest.raises(EventBoundsError):
        ingest(b"1000,5,180,0\n")


def test_empty_file_gives_empty_stream():
    assert len(ingest(b"")) == 0
    assert len(ingest(BINARY_MAGIC, fmt="bin")) == 0


def test_malformed_csv_reports_line():
    with pytest.raises(EventFormatError) as exc:
        ingest(b"1,2,3,1\n5,6,seven,0\n")
    assert exc.value.line == 2


def test_bad_polarity_rejected():
    with pytest.raises((EventFormatError, EventBoundsError)):
        ingest(b"1,2,3,2\n")


def test_truncated_binary_reports_offset():
    data = dumps_events(make_events([1, 2], [3, 4], [5, 6], [1, 0]), "bin")[:-3]
    with pytest.raises(EventFormatError) as exc:
        ingest(data, fmt="bin")
    assert exc.value.offset is not None


def test_small_regression_is_sorted():
    ev = ingest(b"1000,1,1,1\n600,2,2,0\n2000,3,3,1\n")
    assert ev["t"].tolist() == [600, 1000, 2000]


def test_large_regression_raises():
    with pytest.raises(EventOrderError):
        ingest(b"5000,1,1,1\n1000,2,2,0\n")


def test_unknown_format():
    with pytest.raises(ConfigError):
        ingest(b"", fmt="aedat")


event_lists = st.lists(
    st.tuples(st.integers(0, 2**40), st.integers(0, WIDTH - 1), st.integers(0, HEIGHT - 1),
              st.integers(0, 1)),
    max_size=50,
)


@given(event_lists, st.sampled_from(["csv", "bin"]))
def test_round_trip_bit_exact(rows, fmt):
    rows.sort(key=lambda r: r[0])
    ev = np.array(rows, dtype=EVENT_DTYPE)
    data = dumps_events(ev, fmt)
    back = ingest(data, fmt=fmt)
    assert back.tobytes() == ev.tobytes()
    assert dumps_events(back, fmt) == data


def test_file_round_trip_and_format_guess(tmp_path):
    ev = make_events([1, 5, 9], [0, 239, 10], [0, 179, 20], [1, 0, 1])
    for name in ("a.csv", "a.bin"):
        write_events(tmp_path / name, ev)
        assert read_events(tmp_path / name).tobytes() == ev.tobytes()


def test_binary_layout_is_packed_little_endian():
    data = dumps_events(make_events([1], [2], [3], [1]), "bin")
    assert data == BINARY_MAGIC + (1).to_bytes(8, "little") + (2).to_bytes(2, "little") \
        + (3).to_bytes(2, "little") + b"\x01"


# ---------------------------------------------------------------------------
# states and transitions


def test_first_event_sets_state_without_transition():
    g = PixelStateGrid()
    assert apply_event(g, Event(0, 1, 1, 1)) is None
    assert g.state[1, 1] == PixelState.PLUS


def test_minus_to_plus_is_positive_transition():
    g = PixelStateGrid()
    apply_event(g, Event(0, 1, 1, 0))
    tr = apply_event(g, Event(5, 1, 1, 1))
    assert tr == Transition(5, Kind.P, 1, 1)


def test_same_polarity_is_no_op():
    g = PixelStateGrid()
    apply_event(g, Event(0, 1, 1, 1))
    assert apply_event(g, Event(5, 1, 1, 1)) is None
    assert g.state[1, 1] == PixelState.PLUS


def _feed(g, seq):
    out = []
    for t, p in seq:
        tr = apply_event(g, Event(t, 2, 3, p))
        if tr is not None:
            out.append(interval_of(g, tr))
    return out


def test_interval_between_positive_transitions():
    g = PixelStateGrid()
    res = _feed(g, [(0, 0), (3, 1), (4, 0), (8, 1)])
    assert res[0] is None  # first p
    assert res[-1].delta == 5 and res[-1].kind == Kind.P


def test_negative_transition_ignored_for_p_interval():
    g = PixelStateGrid()
    res = _feed(g, [(0, 0), (3, 1), (5, 0), (8, 1)])
    p = [r for r in res if r is not None and r.kind == Kind.P]
    assert [r.delta for r in p] == [5]


def test_square_wave_intervals_equal_period():
    T = 3000
    t = np.arange(0, 30 * T, T // 2)
    ev = make_events(t, np.full(t.size, 7), np.full(t.size, 9), (np.arange(t.size) + 1) % 2)
    iv = compute_intervals(ev)
    assert iv.size > 0
    assert set(iv["delta"].tolist()) == {T}
    assert set(iv["kind"].tolist()) == {0, 1}


def test_stored_times_never_exceed_latest():
    rng = np.random.default_rng(0)
    g = PixelStateGrid()
    for e in make_events(np.sort(rng.integers(0, 1000, 200)), rng.integers(0, 3, 200),
                         rng.integers(0, 3, 200), rng.integers(0, 2, 200)).tolist():
        apply_event(g, e)
        assert g.last.max() <= g.latest_t


# ---------------------------------------------------------------------------
# vectorised pipeline vs oracle


def random_stream(rng, n, n_pix=6, t_max=50_000):
    t = np.sort(rng.integers(0, t_max, n))
    x = rng.integers(0, n_pix, n)
    y = rng.integers(0, n_pix, n)
    return make_events(t, x, y, rng.integers(0, 2, n))


@given(st.integers(0, 2**32 - 1), st.integers(0, 400))
def test_fast_path_matches_brute_force(seed, n):
    ev = random_stream(np.random.default_rng(seed), n)
    assert as_tuples(compute_intervals(ev)) == brute_intervals(ev)


@given(st.integers(0, 2**32 - 1), st.integers(0, 200))
def test_replay_matches_brute_force(seed, n):
    ev = random_stream(np.random.default_rng(seed), n, n_pix=3, t_max=500)
    assert as_tuples(intervals_by_replay(ev)) == brute_intervals(ev)


@given(st.integers(0, 2**32 - 1))
def test_intervals_positive(seed):
    ev = random_stream(np.random.default_rng(seed), 300, n_pix=2, t_max=100)
    iv = compute_intervals(ev)
    assert np.all(iv["delta"] > 0)


def test_duplicate_events_are_harmless():
    ev = make_events([0, 0, 10, 10, 20, 30], [1] * 6, [1] * 6, [1, 1, 0, 0, 1, 0])
    assert as_tuples(compute_intervals(ev)) == brute_intervals(ev)


# ---------------------------------------------------------------------------
# windows


def test_window_boundary_containment():
    ev = make_events([0, 500, 10_000, 10_500], [0] * 4, [0] * 4, [0, 1, 0, 1])
    iv = np.zeros(2, dtype=INTERVAL_DTYPE)
    iv["t"] = [500, 10_500]
    iv["delta"] = 3000
    first = next(windows(ev, iv, length=10_000, step=1_000))
    assert first.intervals["t"].tolist() == [500]
    assert first.events["t"].max() < 10_000


def test_window_starts_step_apart():
    ev = make_events([0, 25_000], [0, 0], [0, 0], [0, 1])
    starts = [w.start for w in windows(ev, length=10_000, step=1_000)]
    assert starts == [1_000 * k for k in range(len(starts))]


def test_windows_without_intervals_still_emitted():
    ev = make_events([0, 5_000], [0, 1], [0, 1], [0, 1])
    ws = list(windows(ev, length=2_000, step=1_000))
    assert [w.start for w in ws] == [0, 1_000, 2_000, 3_000, 4_000, 5_000]
    assert all(w.intervals.size == 0 for w in ws)


@pytest.mark.parametrize("length,step", [(10_000, 0), (1_000, 2_000), (0, 0)])
def test_bad_window_config(length, step):
    with pytest.raises(ConfigError):
        next(windows(make_events([0], [0], [0], [0]), length=length, step=step))


@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_window_counts_tile_stream(seed, k):
    ev = random_stream(np.random.default_rng(seed), 200, t_max=20_000)
    step = 1_000 * k
    total = np.zeros((HEIGHT, WIDTH), dtype=np.int64)
    for w in windows(ev, length=step, step=step):
        assert np.all((w.events["t"] >= w.start) & (w.events["t"] < w.stop))
        total += w.event_counts()
    assert total.sum() == len(ev)


def test_ingest_accepts_file_object():
    ev = ingest(io.BytesIO(b"10,1,2,0\n"))
    assert ev.tolist() == [(10, 1, 2, 0)]
