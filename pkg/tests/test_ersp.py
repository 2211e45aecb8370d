import numpy as np
import pytest

from conftest import make_event
from trajdecode.core import ONLINE17, EegStream
from trajdecode.ersp import (ErspConfig, PairSet, baseline_normalize, build_training_pairs,
                             read_ersp_cache, read_ersp_header, tf_power, trial_ersp,
                             trial_frame_times, window_stack, write_ersp_cache)
from trajdecode.synth import ForwardModelConfig, session_weights
from trajdecode.errors import (AlignmentError, InsufficientData, InsufficientHistory,
                               InvalidBaseline, ShapeError)

FS = 250.0


def tone(freq, seconds=6.0, amp=1.0, n_ch=1):
    t = np.arange(int(seconds * FS)) / FS
    return EegStream(FS, np.tile(amp * np.cos(2 * np.pi * freq * t), (n_ch, 1)))


def direct_power(x, fs, freq, cycles, sd, idx):
    """Wavelet power by explicit dot products at sample indices ``idx``."""
    sigma = cycles / (2 * np.pi * freq)
    m = int(np.ceil(sd * sigma * fs))
    taps = np.arange(-m, m + 1)
    g = np.exp(-0.5 * (taps / (sigma * fs)) ** 2)
    w = np.exp(2j * np.pi * freq * taps / fs) * g / g.sum()
    out = []
    for i in idx:
        s = 0j
        for j, tap in enumerate(taps):
            k = i - tap
            if 0 <= k < x.size:
                s += x[k] * w[j]
        out.append(abs(s) ** 2)
    return np.array(out)


def test_config_invariants():
    cfg = ErspConfig()
    assert len(cfg.freqs_hz) == 40 and cfg.image_width * cfg.hop_s == pytest.approx(cfg.lookback_s)
    with pytest.raises(ValueError):
        ErspConfig(lookback_s=0.5)
    with pytest.raises(ValueError):
        ErspConfig(freqs_hz=(3, 2))


def test_power_matches_direct_convolution():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(1500)
    cfg = ErspConfig(freqs_hz=(4, 11, 27))
    idx = np.array([0, 200, 733, 1499])
    tp = tf_power(EegStream(FS, x[None]), cfg, idx / FS)
    for k, f in enumerate(cfg.freqs_hz):
        ref = direct_power(x, FS, f, cfg.wavelet_cycles, cfg.support_sd, idx)
        np.testing.assert_allclose(tp.power[0, k], ref, rtol=1e-9, atol=1e-15)
    for k, f in enumerate(cfg.freqs_hz):
        m = int(np.ceil(cfg.support_sd * cfg.wavelet_cycles / (2 * np.pi * f) * FS))
        assert tp.edge[k].tolist() == [bool(i - m < 0 or i + m > 1499) for i in idx]


def test_unit_cosine_gives_quarter_power_and_peak():
    tp = tf_power(tone(10.0, seconds=12.0), ErspConfig(), np.array([6.0]))
    p = tp.power[0, :, 0]
    assert int(np.argmax(p)) == 9
    assert p[9] == pytest.approx(0.25, rel=1e-3)
    assert p[9] >= 10 * p[19]


def test_zero_and_scaling():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 2000))
    times = np.array([2.0, 4.0, 6.0])
    zero = tf_power(EegStream(FS, np.zeros((2, 2000))), ErspConfig(), times)
    assert np.all(zero.power == 0)
    a = tf_power(EegStream(FS, x), ErspConfig(), times).power
    b = tf_power(EegStream(FS, 2 * x), ErspConfig(), times).power
    np.testing.assert_allclose(b, 4 * a, rtol=1e-12)


def test_stream_shorter_than_wavelet():
    with pytest.raises(InsufficientData):
        tf_power(EegStream(FS, np.zeros((1, 100))), ErspConfig())


def test_baseline_worked_examples():
    base = np.full((1, 1, 4), 3.0)
    assert np.all(baseline_normalize(base, np.ones(4, bool)) == 0)
    p = np.array([[[1.0, 1.0, 2.0, 0.1]]])
    out = baseline_normalize(p, np.array([True, True, False, False]))[0, 0]
    assert out[2] == pytest.approx(10 * np.log10(2), abs=1e-12)
    assert out[2] == pytest.approx(3.0103, abs=1e-4)
    assert out[3] == pytest.approx(-10.0, abs=1e-12)
    with pytest.raises(InvalidBaseline):
        baseline_normalize(p, np.zeros(4, bool))


def test_rest_frames_average_to_zero_db():
    rng = np.random.default_rng(2)
    p = rng.exponential(size=(3, 5, 50))
    rest = np.arange(50) < 20
    out = baseline_normalize(p, rest)
    assert np.max(np.abs(out[..., rest].mean(axis=-1))) < 1e-12


def test_window_stack_order_and_errors():
    frames = np.arange(50, dtype=float)[None, None, :] * np.ones((2, 3, 1))
    times = 0.016 * np.arange(50)
    vol = window_stack(frames, times, times[45])
    assert vol.images.shape == (2, 3, 40)
    assert vol.images[0, 0].tolist() == list(range(6, 46))
    const = window_stack(np.ones((2, 3, 50)), times, times[45])
    assert np.all(const.images == const.images[..., :1])
    with pytest.raises(InsufficientHistory):
        window_stack(frames, times, times[38])
    window_stack(frames, times, times[39])
    with pytest.raises(AlignmentError):
        window_stack(frames, times, times[-1] + 0.01)


def test_trial_grid_hits_onset():
    ev = make_event(0, t0=1.0)
    times, onset = trial_frame_times(ev, 0.016)
    assert times[onset] == ev.t_target_s
    assert times[0] >= ev.t_rest_s - 1e-9 and times[-1] <= ev.t_end_s + 1e-9
    assert onset >= 39


def test_trial_ersp_of_synthetic_session(tiny_session):
    eeg = tiny_session.eeg.pick(tiny_session.montage.index(ONLINE17))
    ev = tiny_session.trials[0]
    frames, times, onset = trial_ersp(eeg, ev)
    assert frames.dtype == np.float32 and frames.shape[:2] == (17, 40)
    rest = (times >= ev.t_rest_s) & (times < ev.t_indication_s)
    assert np.max(np.abs(frames[..., rest].mean(axis=-1))) < 1e-4


def test_amplitude_scaling_invariance(tiny_session):
    eeg = tiny_session.eeg.pick(tiny_session.montage.index(ONLINE17))
    ev = tiny_session.trials[1]
    times, _ = trial_frame_times(ev, 0.016)
    rest = (times >= ev.t_rest_s) & (times < ev.t_indication_s)
    a = baseline_normalize(tf_power(eeg, ErspConfig(), times).power, rest)
    b = baseline_normalize(tf_power(EegStream(FS, 37.5 * eeg.data), ErspConfig(), times).power, rest)
    assert np.max(np.abs(a - b)) < 1e-9


def test_movement_ersp_has_sign_of_modulation(small_session):
    """Carrier-band ERSP during reaches moves with the injected depth on a tuned channel."""
    pairs = build_training_pairs(small_session)
    w = session_weights(ForwardModelConfig(seed=3), 1, small_session.montage.channels)
    ch = ONLINE17.index("C3")
    lab = pairs.label_array()
    alpha = slice(7, 12)
    act = np.array([pairs.frames[t][ch, alpha, pairs.onset_index[t] + s].mean()
                    for t, s in zip(pairs.trial_of, pairs.step_of)])
    depth = lab @ w[small_session.montage.index(["C3"])[0]]
    assert np.corrcoef(act, depth)[0, 1] > 0.2


def test_pairs_per_trial(tiny_session):
    pairs = build_training_pairs(tiny_session)
    assert len(pairs) == 125 * 16 and pairs.n_trials == 16
    vol, lab = pairs[130]
    assert vol.images.shape == (17, 40, 40) and lab.shape == (3,)
    assert pairs.input_shape == (17, 40, 40)
    assert vol.step_time_s == pytest.approx(tiny_session.trials[1].t_target_s + 5 * 0.016)


def test_pair_count_for_256_trials():
    frames = tuple(np.zeros((1, 1, 170), np.float32) for _ in range(256))
    labels = tuple(np.zeros((125, 3)) for _ in range(256))
    events = tuple(make_event(i, t0=8.0 * i) for i in range(256))
    pairs = PairSet(frames, np.full(256, 40), events, labels, 0.016, 40)
    assert len(pairs) == 32_000


def test_empty_session_gives_no_pairs(tiny_session):
    from trajdecode.core import SessionDataset
    empty = SessionDataset(1, "vr", 1.0, tiny_session.montage, tiny_session.eeg, tiny_session.kin, ())
    assert len(build_training_pairs(empty)) == 0


def test_label_grid_mismatch(tiny_session):
    with pytest.raises(AlignmentError):
        build_training_pairs(tiny_session, labels=[np.zeros((100, 3))] * 16)


def test_cache_roundtrip(tmp_path, tiny_session):
    pairs = build_training_pairs(tiny_session)
    path = write_ersp_cache(pairs, tmp_path / "c.ersp", meta={"config_hash": "x"})
    head = read_ersp_header(path)
    assert (head["channels"], head["freqs"], head["count"]) == (17, 40, 16)
    back = read_ersp_cache(path, tiny_session)
    assert len(back) == len(pairs)
    for a, b in zip(back.frames, pairs.frames):
        assert a.dtype == np.float32 and np.array_equal(a, b)
    np.testing.assert_array_equal(back.label_array(), pairs.label_array())


def test_cache_rejects_garbage(tmp_path, tiny_session):
    bad = tmp_path / "bad.ersp"
    bad.write_bytes(b"NOTACACHE")
    with pytest.raises(ShapeError):
        read_ersp_cache(bad, tiny_session)
