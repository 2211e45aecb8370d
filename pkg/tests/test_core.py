import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_event
from trajdecode.core import (ASSISTANCE_SCHEDULE, CANONICAL_BANDS, FC32, ONLINE17, EegStream,
                             FrequencyBand, KinematicStream, Montage, SessionDataset, VelocityTrack,
                             band_by_name, builtin_montage, check_trial_timing,
                             differentiate_velocity, resample_to_grid, scoring_steps,
                             segment_trials, substream, trial_labels)
from trajdecode.errors import (AlignmentError, InsufficientData, InvalidTimestamps, OutOfBounds,
                               ShapeError)


def test_online_montage_labels():
    assert ONLINE17 == ("F3", "FZ", "F4", "FC5", "FC1", "FC2", "FC6", "C3", "CZ", "C4",
                        "CP5", "CP1", "CP2", "CP6", "P3", "PZ", "P4")
    m = builtin_montage("online17")
    assert len(m) == 17 and m.positions.shape == (17, 2)


def test_fc_montage_has_32_unique_labels_covering_online():
    m = builtin_montage("fc32")
    assert len(m) == 32 == len(set(FC32))
    assert set(ONLINE17) <= set(FC32)


def test_montage_rejects_duplicates_and_unknown():
    with pytest.raises(ShapeError):
        Montage("bad", ("C3", "C3"))
    with pytest.raises(ShapeError):
        builtin_montage("online17").index(["XX"])
    with pytest.raises(KeyError):
        builtin_montage("nope")


def test_canonical_bands():
    assert [(b.name, b.lo_hz, b.hi_hz) for b in CANONICAL_BANDS] == [
        ("delta", 0, 4), ("theta", 4, 8), ("alpha", 8, 12), ("low-beta", 12, 18),
        ("high-beta", 18, 28), ("gamma", 28, 40)]
    assert band_by_name("alpha").hi_hz == 12
    with pytest.raises(ValueError):
        FrequencyBand("x", 5, 5)


def test_stream_invariants():
    with pytest.raises(ValueError):
        EegStream(0.0, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        EegStream(250.0, np.array([[np.nan, 0.0]]))
    with pytest.raises(ShapeError):
        EegStream(250.0, np.zeros(3))
    with pytest.raises(ShapeError):
        KinematicStream(np.arange(3.0), np.zeros((3, 2)))
    kin = KinematicStream(np.array([0, 1 / 60, 2 / 60, 0.2]), np.zeros((4, 3)))
    with pytest.raises(InvalidTimestamps):
        kin.check_rate(60.0, 0.25)


# ---------------------------------------------------------------------------
# Velocity
# ---------------------------------------------------------------------------

def test_velocity_worked_example():
    kin = KinematicStream(np.array([0.0, 1 / 60]), np.array([[0.0, 0, 0], [0.01, 0, 0]]))
    v = differentiate_velocity(kin)
    np.testing.assert_allclose(v.velocities_mps, [[0.6, 0, 0]], rtol=1e-12)
    assert v.timestamps_s[0] == 1 / 60


def test_velocity_ramp_and_constant():
    kin = KinematicStream(np.arange(3.0), np.array([[0.0] * 3, [1.0] * 3, [3.0] * 3]))
    assert differentiate_velocity(kin).velocities_mps.tolist() == [[1, 1, 1], [2, 2, 2]]
    still = KinematicStream(np.arange(5.0), np.ones((5, 3)) * 0.3)
    assert np.all(differentiate_velocity(still).velocities_mps == 0)


def test_velocity_errors():
    with pytest.raises(InsufficientData):
        differentiate_velocity(KinematicStream(np.zeros(1), np.zeros((1, 3))))
    with pytest.raises(InvalidTimestamps):
        differentiate_velocity(KinematicStream(np.array([0.0, 1.0, 1.0]), np.zeros((3, 3))))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_velocity_length_and_displacement(n, seed):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.01, 0.03, n))
    p = rng.standard_normal((n, 3))
    v = differentiate_velocity(KinematicStream(t, p))
    assert len(v) == n - 1
    # sum of v*dt telescopes back to the net displacement
    np.testing.assert_allclose(np.sum(v.velocities_mps * np.diff(t)[:, None], axis=0),
                               p[-1] - p[0], rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def test_resample_identity_and_line():
    t = np.arange(50) / 60
    v = np.column_stack([t, 2 * t, -t])
    track = VelocityTrack(t, v)
    same = resample_to_grid(track, 1 / 60)
    np.testing.assert_allclose(same.velocities_mps, v, atol=1e-12)
    grid = resample_to_grid(track, 0.016)
    np.testing.assert_allclose(grid.velocities_mps[:, 1], 2 * grid.timestamps_s, atol=1e-12)


def test_resample_step_midpoint():
    track = VelocityTrack(np.array([0.0, 1.0]), np.array([[0.0], [1.0]]))
    out = resample_to_grid(track, 0.5)
    assert out.velocities_mps[:, 0].tolist() == [0.0, 0.5, 1.0]


def test_resample_errors():
    with pytest.raises(InsufficientData):
        resample_to_grid(VelocityTrack(np.zeros(0), np.zeros((0, 3))), 0.1)
    with pytest.raises(ValueError):
        resample_to_grid(VelocityTrack(np.zeros(1), np.zeros((1, 3))), 0.0)


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------

def _session(n_trials=2, eeg_s=None):
    events = [make_event(i, i % 4, t0=1.0 + 7.6 * i) for i in range(n_trials)]
    dur = 1.0 + 7.6 * n_trials + 1.0 if eeg_s is None else eeg_s
    eeg = EegStream(250.0, np.zeros((17, int(dur * 250))))
    t = np.arange(int((1.0 + 7.6 * n_trials + 1.0) * 60)) / 60
    kin = KinematicStream(t, np.column_stack([np.sin(t), t, t ** 2]))
    return SessionDataset(1, "vr", 1.0, builtin_montage("online17"), eeg, kin, events)


def test_phase_durations_are_checked():
    check_trial_timing(make_event(0))
    bad = make_event(0)
    object.__setattr__(bad, "t_target_s", bad.t_target_s + 0.01)
    with pytest.raises(InvalidTimestamps):
        check_trial_timing(bad)
    with pytest.raises(InvalidTimestamps):
        make_event(0).__class__(0, 0, "executed", 0, 2, 1, 3, 4)


def test_segment_worked_examples():
    views = segment_trials(_session())
    a, b = views[0].eeg_ranges["target"]
    assert b - a == 625
    va, vb = views[0].vel_ranges["scoring"]
    assert vb - va == 120


def test_segment_out_of_bounds():
    with pytest.raises(OutOfBounds):
        segment_trials(_session(eeg_s=8.0))


def test_scoring_steps_and_labels():
    assert scoring_steps(2.0, 0.016) == 125
    labels = trial_labels(_session())
    assert [lab.shape for lab in labels] == [(125, 3), (125, 3)]
    # y position is t, so its velocity is exactly 1
    np.testing.assert_allclose(labels[0][:, 1], 1.0, atol=1e-9)


def test_imagined_trials_use_executed_template():
    s = _session(4)
    events = list(s.trials)
    events[2] = make_event(2, events[0].target_id, t0=events[2].t_rest_s, condition="imagined")
    s2 = SessionDataset(1, "vr", 1.0, s.montage, s.eeg, s.kin, events)
    labels = trial_labels(s2)
    np.testing.assert_array_equal(labels[2], labels[0])


def test_labels_need_kinematic_coverage():
    s = _session()
    short = KinematicStream(s.kin.timestamps_s[:100], s.kin.positions_m[:100])
    s2 = SessionDataset(1, "vr", 1.0, s.montage, s.eeg, short, s.trials)
    with pytest.raises(AlignmentError):
        trial_labels(s2)


def test_session_invariants():
    s = _session()
    with pytest.raises(ShapeError):
        SessionDataset(1, "vr", 1.0, builtin_montage("fc32"), s.eeg, s.kin, s.trials)
    with pytest.raises(ValueError):
        SessionDataset(1, "tv", 1.0, s.montage, s.eeg, s.kin, s.trials)
    assert ASSISTANCE_SCHEDULE[1] == 1.0 and ASSISTANCE_SCHEDULE[9] == 0.4


def test_substreams_are_independent_and_stable():
    a = substream(1, "data").integers(0, 2**31, 4)
    assert np.array_equal(a, substream(1, "data").integers(0, 2**31, 4))
    assert not np.array_equal(a, substream(1, "init").integers(0, 2**31, 4))
    assert not np.array_equal(a, substream(2, "data").integers(0, 2**31, 4))
