import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evgrasp.events import EVENT_DTYPE, HEIGHT, INTERVAL_DTYPE, WIDTH, ConfigError, WindowView, make_events
from evgrasp.smp_filter import (
    FilterConfig, MarkerSpec, SMPTracker, TrackState, check_markers, check_reselect, clamp_positions,
    default_markers, effective_sample_size, estimate_position, evidence_gaussian, failure_cycles,
    is_failure, log_to_trajectory, maybe_resample, normalize, propagate, read_track_log, reselect,
    spatial_evidence, systematic_resample, temporal_evidence, track_cycle, triangle_pdf, update_weights,
    write_track_log,
)
from evgrasp.synth import LedSpec, SyntheticScene, generate

SIG = 100.0
PEAK = 2 / (5 * SIG)


def window_with(intervals, events_per_pixel=3, marker_pixels=None):
    """A window holding the given ``(x, y, delta)`` intervals and filler events."""
    iv = np.zeros(len(intervals), dtype=INTERVAL_DTYPE)
    if len(intervals):
        iv["x"], iv["y"], iv["delta"] = np.array(intervals).T
        iv["t"] = 5_000
    pix = marker_pixels if marker_pixels is not None else sorted({(x, y) for x, y, _ in intervals})
    rows = [(100 + k, x, y, k % 2) for x, y in pix for k in range(events_per_pixel)]
    rows.sort()
    ev = np.array(rows, dtype=EVENT_DTYPE) if rows else np.empty(0, EVENT_DTYPE)
    return WindowView(0, 10_000, 1_000, iv, ev)


# ---------------------------------------------------------------------------
# triangle and temporal evidence


def test_triangle_values():
    assert triangle_pdf(3000, 3000, SIG) == pytest.approx(PEAK)
    assert triangle_pdf(3000 + 2.5 * SIG, 3000, SIG) == 0
    assert triangle_pdf(3000 - 2.5 * SIG, 3000, SIG) == 0
    assert triangle_pdf(3000 + 1.25 * SIG, 3000, SIG) == pytest.approx(1 / (5 * SIG))


@given(st.floats(10, 1000))
def test_triangle_unit_area(sigma):
    xs = np.linspace(-3 * sigma, 3 * sigma, 200_001)
    area = np.trapezoid(triangle_pdf(xs, 0.0, sigma), xs)
    assert area == pytest.approx(1.0, rel=1e-4)


def test_temporal_evidence_two_peak_hits():
    m = MarkerSpec(1, 3000, SIG)
    et = temporal_evidence(window_with([(5, 6, 3000), (5, 6, 3000)]), m)
    assert et[6, 5] == pytest.approx(2 * PEAK)
    assert et.sum() == pytest.approx(2 * PEAK)


def test_temporal_evidence_other_period_is_zero():
    et = temporal_evidence(window_with([(5, 6, 3800)]), MarkerSpec(1, 3000, SIG))
    assert et.max() == 0


def test_temporal_evidence_gate():
    w = window_with([(5, 6, 3000), (5, 6, 3000)], events_per_pixel=2)
    assert temporal_evidence(w, MarkerSpec(1, 3000, SIG)).max() == 0


def test_temporal_selectivity():
    markers = default_markers()
    for m in markers:
        w = window_with([(1, 1, m.period_us)])
        ets = [temporal_evidence(w, o)[1, 1] for o in markers]
        assert ets[m.id - 1] > 0
        assert all(e < ets[m.id - 1] for i, e in enumerate(ets) if i != m.id - 1)


# ---------------------------------------------------------------------------
# particle operations


def test_propagate_zero_sigma_is_identity(rng):
    pos = rng.random((50, 2)) * 100
    assert np.array_equal(propagate(pos, 0.0, rng), pos)


def test_propagate_deterministic():
    pos = np.full((100, 2), 50.0)
    a = propagate(pos, 2.0, np.random.default_rng(3))
    b = propagate(pos, 2.0, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_propagate_clamps(rng):
    out = propagate(np.zeros((500, 2)), 1e4, rng)
    assert out.min() >= 0 and out[:, 0].max() <= WIDTH - 1 and out[:, 1].max() <= HEIGHT - 1


def test_propagate_step_spread(rng):
    out = propagate(np.full((20_000, 2), 100.0), 2.0, rng)
    assert np.std(out - 100.0) == pytest.approx(2.0, rel=0.03)


def test_check_reselect_examples():
    assert check_reselect(np.zeros(10), 1e-9)
    assert not check_reselect(np.zeros(10), 0.0)
    et = np.zeros(10)
    et[0] = PEAK
    assert check_reselect(et, PEAK + 1e-12)
    assert not check_reselect(et, PEAK)


def test_reselect_single_pixel(rng):
    et = np.zeros((HEIGHT, WIDTH))
    et[7, 9] = 1.0
    pos, w = reselect(et, 100, rng)
    assert np.all(pos == [9, 7])
    assert np.allclose(w, 1 / 100)


def test_reselect_empty_is_uniform(rng):
    pos, w = reselect(np.zeros((HEIGHT, WIDTH)), 5000, rng)
    assert pos.shape == (5000, 2)
    assert abs(pos[:, 0].mean() - (WIDTH - 1) / 2) < 5 and abs(pos[:, 1].mean() - (HEIGHT - 1) / 2) < 5
    assert np.allclose(w, 1 / 5000)


def test_reselect_proportional(rng):
    et = np.zeros((HEIGHT, WIDTH))
    et[0, 0], et[0, 1] = 1.0, 3.0
    pos, _ = reselect(et, 40_000, rng)
    assert np.mean(pos[:, 0] == 1) == pytest.approx(0.75, abs=0.01)


def test_evidence_gaussian_point_mass():
    et = np.zeros((HEIGHT, WIDTH))
    et[20, 30] = 5.0
    mean, cov = evidence_gaussian(et, eps=1e-6)
    assert np.allclose(mean, [30, 20])
    assert np.allclose(cov, 1e-6 * np.eye(2))
    pos = np.array([[30.0, 20.0], [31.0, 20.0], [60.0, 60.0]])
    es = spatial_evidence(pos, mean, cov)
    assert es.argmax() == 0 and es.sum() == pytest.approx(1.0)


def test_evidence_gaussian_symmetric_pair():
    et = np.zeros((HEIGHT, WIDTH))
    et[10, 10] = et[10, 20] = 1.0
    mean, _ = evidence_gaussian(et)
    assert np.allclose(mean, [15, 10])


def test_spatial_evidence_far_particle_negligible():
    mean, cov = np.array([50.0, 50.0]), np.diag([4.0, 4.0])
    es = spatial_evidence(np.array([[50.0, 50.0], [62.0, 50.0]]), mean, cov)
    # 6 std away: ratio exp(-18)
    assert es[1] / es[0] == pytest.approx(np.exp(-18), rel=1e-9)


def test_spatial_evidence_far_set_no_underflow():
    es = spatial_evidence(np.array([[200.0, 170.0], [201.0, 170.0]]), np.array([0.0, 0.0]), 1e-6 * np.eye(2))
    assert np.isfinite(es).all() and es.sum() == pytest.approx(1.0)


def test_update_weights_examples():
    w = np.full(4, 0.25)
    et = np.array([0.1, 0.2, 0.3, 0.4])
    a, _ = update_weights(w, et, np.full(4, 9.0), 0.0)
    assert np.allclose(a, et / et.sum())
    b, _ = update_weights(w, np.full(4, 0.5), np.full(4, 0.5), 1.0)
    assert np.allclose(b, 0.25)
    c, _ = update_weights(w, np.array([2.0, 1.0, 1.0, 1.0]), np.zeros(4), 1.0)
    assert c[0] == pytest.approx(2 * c[1])


def test_update_weights_degenerate():
    w, flag = update_weights(np.full(4, 0.25), np.zeros(4), np.zeros(4), 1.0)
    assert flag and np.allclose(w, 0.25)


def test_neff_examples():
    assert effective_sample_size(np.full(8, 1 / 8)) == pytest.approx(8)
    assert effective_sample_size(np.array([1.0, 0, 0, 0])) == pytest.approx(1)
    assert effective_sample_size(np.array([0.5, 0.5, 0, 0])) == pytest.approx(2)


def test_maybe_resample(rng):
    pos = np.arange(8, dtype=float)[:, None].repeat(2, 1)
    same, w, done = maybe_resample(pos, np.full(8, 1 / 8), 1.0, rng)
    assert not done and same is pos
    w0 = np.zeros(8)
    w0[3] = 1.0
    out, w, done = maybe_resample(pos, w0, 0.5, rng)
    assert done and np.all(out == 3) and np.allclose(w, 1 / 8)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60).filter(lambda v: sum(v) > 1e-6), st.integers(0, 10**6))
def test_systematic_resample_counts(raw, seed):
    w = np.array(raw) / sum(raw)
    idx = systematic_resample(w, np.random.default_rng(seed))
    n = len(w)
    assert idx.shape == (n,)
    counts = np.bincount(idx, minlength=n)
    # each particle gets floor or ceil of its expected count
    assert np.all(counts >= np.floor(n * w) - 1e-9) and np.all(counts <= np.ceil(n * w) + 1e-9)
    assert np.all(counts[w == 0] == 0)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60).filter(lambda v: sum(v) > 1e-6))
def test_neff_bounds(raw):
    w = normalize(np.array(raw))
    n = effective_sample_size(w)
    assert 1 - 1e-9 <= n <= len(raw) + 1e-9


def test_estimate_examples():
    pos = np.array([[0.0, 0.0], [10.0, 0.0]])
    assert np.allclose(estimate_position(pos, np.array([0.5, 0.5])), [5, 0])
    assert np.allclose(estimate_position(pos, np.array([0.9, 0.1])), [1, 0])
    assert np.allclose(estimate_position(np.full((7, 2), 3.0), np.full(7, 1 / 7)), [3, 3])


def test_clamp():
    assert clamp_positions(np.array([[-3.0, 500.0]])).tolist() == [[0.0, HEIGHT - 1.0]]


def test_marker_validation():
    with pytest.raises(ConfigError):
        MarkerSpec(1, 0.0)
    with pytest.raises(ConfigError):
        check_markers([MarkerSpec(1, 3000), MarkerSpec(2, 3000)])
    with pytest.raises(ConfigError):
        FilterConfig(alpha=-1)
    with pytest.raises(ConfigError):
        FilterConfig(resample_threshold=0)


# ---------------------------------------------------------------------------
# cycles


def test_empty_window_triggers_reselect(rng):
    state = TrackState.initial(4, 200, rng)
    new, info = track_cycle(state, window_with([]), default_markers(), FilterConfig(n_particles=200), rng)
    assert info.reselected.all()
    assert np.allclose(new.weights.sum(-1), 1)
    assert new.positions.shape == state.positions.shape
    assert new.cycle == 1 and state.cycle == 0


@given(st.integers(0, 2**31), st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20),
                                                 st.sampled_from([3000, 3800, 4400, 5000, 1234])),
                                       max_size=40))
def test_cycle_invariants(seed, intervals):
    rng = np.random.default_rng(seed)
    cfg = FilterConfig(n_particles=64)
    state = TrackState.initial(4, 64, rng)
    w = window_with(intervals)
    for _ in range(3):
        state, info = track_cycle(state, w, default_markers(), cfg, rng)
        assert state.positions.shape == (4, 64, 2)
        assert np.allclose(state.weights.sum(-1), 1, atol=1e-9)
        assert np.all((info.n_eff >= 1 - 1e-9) & (info.n_eff <= 64 + 1e-9))
        assert np.all(state.estimates >= 0) and np.all(state.estimates[:, 0] <= WIDTH - 1)


def static_scene(periods, positions, duration_us=300_000, seed=0):
    leds = [LedSpec(p, x, y) for p, (x, y) in zip(periods, positions)]
    return generate(SyntheticScene(leds, duration_us=duration_us, seed=seed))


def test_static_led_converges_within_50_cycles():
    ev, gt = static_scene([3000], [(120.0, 90.0)], duration_us=70_000)
    tr = SMPTracker(periods_us=(3000,), random_state=0).fit(ev)
    # cycle 50 ends at 59 ms
    err = np.linalg.norm(tr.trajectory_[49:, 0] - [120, 90], axis=-1)
    assert err.max() < 3.0


def test_two_markers_no_identity_swap():
    pos = [(60.0, 60.0), (170.0, 120.0)]
    ev, _ = static_scene([3000, 3800], pos, duration_us=200_000)
    tr = SMPTracker(periods_us=(3000, 3800), random_state=1).fit(ev)
    tail = tr.trajectory_[50:]
    assert np.linalg.norm(tail[:, 0] - pos[0], axis=-1).max() < 3
    assert np.linalg.norm(tail[:, 1] - pos[1], axis=-1).max() < 3


def test_tracker_deterministic():
    ev, _ = static_scene([3000, 5000], [(50.0, 50.0), (150.0, 100.0)], duration_us=60_000)
    a = SMPTracker(periods_us=(3000, 5000), random_state=7).fit(ev)
    b = SMPTracker(periods_us=(3000, 5000), random_state=7).fit(ev)
    assert np.array_equal(a.trajectory_, b.trajectory_)


def test_fit_matches_track_cycle_loop():
    from evgrasp.events import windows

    ev, _ = static_scene([3000, 4400], [(40.0, 40.0), (100.0, 140.0)], duration_us=30_000)
    tr = SMPTracker(periods_us=(3000, 4400), n_particles=100, random_state=5).fit(ev, stop_us=30_000)
    rng = np.random.default_rng(5)
    cfg = FilterConfig(n_particles=100)
    markers = default_markers((3000, 4400))
    state = TrackState.initial(2, 100, rng)
    traj = []
    for w in windows(ev, length=10_000, step=1_000, stop=30_000):
        if w.stop > 30_000:
            break
        state, _ = track_cycle(state, w, markers, cfg, rng)
        traj.append(state.estimates)
    assert np.allclose(np.array(traj), tr.trajectory_)


def test_predict_and_log(tmp_path):
    ev, _ = static_scene([3000], [(30.0, 30.0)], duration_us=20_000)
    tr = SMPTracker(periods_us=(3000,), n_particles=50, random_state=0).fit(ev)
    assert np.array_equal(tr.predict(tr.cycle_times_[-1])[0], tr.trajectory_[-1])
    with pytest.raises(ValueError):
        tr.predict(0)
    log = tr.track_log()
    write_track_log(tmp_path / "t.csv", log)
    back = read_track_log(tmp_path / "t.csv")
    assert back.tobytes() == log.tobytes()
    times, ids, pos = log_to_trajectory(back)
    assert np.array_equal(pos, tr.trajectory_) and ids.tolist() == [1]


def test_get_params_round_trip():
    tr = SMPTracker(alpha=0.0, n_particles=10)
    assert tr.get_params()["alpha"] == 0.0
    assert SMPTracker(**tr.get_params()).get_params() == tr.get_params()


def test_failure_rule():
    traj = np.zeros((300, 2, 2))
    traj[:, 1] = [100, 100]
    traj[50:151, 1] = [1, 0]  # 101 close cycles
    assert failure_cycles(traj) == 101
    assert is_failure(traj)
    traj[50:150, 1] = [1, 0]
    traj[150, 1] = [100, 100]
    assert not is_failure(traj)
