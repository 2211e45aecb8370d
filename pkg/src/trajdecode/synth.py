"""Synthetic sessions with a known EEG <-> velocity forward model.

Each channel carries a 1/f^gamma background plus a narrow-band carrier
inside ``carrier_band`` whose amplitude envelope is ``1 + w_c . v_hat(t)``,
where ``w_c`` is the channel's tuning vector and ``v_hat`` the per-axis
normalized instantaneous velocity of the intended reach. Negative depth
is desynchronisation. ``snr`` is the power of the velocity-driven part of
the carrier (averaged over tuned channels and reach periods) relative to
the background power inside the same band.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .core import (DEFAULT_TIMING, ONLINE17, EegStream, FrequencyBand,
                   KinematicStream, SessionDataset, TrialEvent, TrialTiming,
                   assistance_for_session, band_by_name, builtin_montage,
                   differentiate_velocity, substream, trial_labels)
from .errors import ShapeError

DEFAULT_TUNING = {
    "C3": (0.10, 0.40, -0.40),
    "C4": (0.05, -0.35, -0.45),
    "CZ": (0.05, 0.45, -0.35),
    "FC1": (0.10, -0.40, -0.30),
    "FC2": (-0.10, 0.35, -0.40),
    "CP1": (0.10, -0.30, -0.45),
    "CP2": (-0.10, 0.40, -0.30),
}

# Offsets from the rest position (m). Toolkit defaults, not measured geometry.
DEFAULT_TARGETS = (
    (-0.15, 0.10, 0.30),
    (0.15, 0.10, 0.25),
    (-0.15, -0.10, 0.35),
    (0.15, -0.10, 0.30),
)


@dataclass(frozen=True)
class ForwardModelConfig:
    snr: float = 2.0
    tuned_channels: dict = field(default_factory=lambda: dict(DEFAULT_TUNING))
    carrier_band: FrequencyBand = band_by_name("alpha")
    noise_exponent: float = 1.0
    session_drift: float = 0.0
    seed: int = 0
    mixing: np.ndarray | None = None
    imagery_gain: float = 1.0

    def __post_init__(self):
        if not self.snr >= 0:
            raise ValueError("snr must be >= 0")
        if not 0.0 <= self.session_drift <= 1.0:
            raise ValueError("session_drift must be in [0, 1]")
        for ch, w in self.tuned_channels.items():
            w = np.asarray(w, dtype=float)
            if w.shape != (3,) or not np.all(np.isfinite(w)):
                raise ValueError(f"tuning for {ch} must be a finite 3-vector")


@dataclass(frozen=True)
class Protocol:
    n_trials: int = 256
    block_size: int = 16
    eeg_rate_hz: float = 250.0
    kin_rate_hz: float = 60.0
    montage: str = "fc32"
    timing: TrialTiming = DEFAULT_TIMING
    reach_duration_s: float = 2.0
    targets: tuple = DEFAULT_TARGETS
    endpoint_jitter_m: float = 0.005
    lead_in_s: float = 4.0
    tail_s: float = 4.0
    background_rms_uv: float = 10.0

    def __post_init__(self):
        if self.n_trials % self.block_size:
            raise ValueError("n_trials must be a multiple of block_size")

    @property
    def run_length(self) -> int:
        per_run = self.n_trials // 8
        return per_run if per_run and per_run % self.block_size == 0 else self.block_size


@dataclass(frozen=True)
class ReachPlan:
    target_id: int
    start_m: tuple
    end_m: tuple
    duration_s: float = 2.0

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValueError("duration_s must be positive")


def _mj_shape(tau):
    tau = np.clip(tau, 0.0, 1.0)
    return tau ** 3 * (10 - 15 * tau + 6 * tau ** 2)


def _mj_rate(tau):
    inside = (tau >= 0) & (tau <= 1)
    return np.where(inside, 30 * tau ** 2 * (1 - tau) ** 2, 0.0)


def minimum_jerk(plan: ReachPlan, rate_hz: float) -> KinematicStream:
    """Sample the minimum-jerk reach of ``plan`` at ``rate_hz``, t=0..T."""
    if not rate_hz > 0:
        raise ValueError("rate_hz must be positive")
    n = int(np.floor(plan.duration_s * rate_hz + 1e-9)) + 1
    t = np.arange(n) / rate_hz
    p0, p1 = np.asarray(plan.start_m, float), np.asarray(plan.end_m, float)
    pos = p0 + np.outer(_mj_shape(t / plan.duration_s), p1 - p0)
    return KinematicStream(t, pos)


def apply_assistance(v_decoded, v_ideal, a: float) -> np.ndarray:
    """Blend decoded and ideal velocity: ``a * ideal + (1 - a) * decoded``."""
    v_decoded = np.asarray(v_decoded, dtype=float)
    v_ideal = np.asarray(v_ideal, dtype=float)
    if v_decoded.shape != v_ideal.shape:
        raise ShapeError(f"shape mismatch {v_decoded.shape} vs {v_ideal.shape}")
    if not 0.0 <= a <= 1.0:
        raise ValueError("assistance fraction must be in [0, 1]")
    return a * v_ideal + (1.0 - a) * v_decoded


# ---------------------------------------------------------------------------
# Channel tuning and drift
# ---------------------------------------------------------------------------

def _rotate(w: np.ndarray, theta: float, rng: np.random.Generator) -> np.ndarray:
    norm = np.linalg.norm(w)
    if norm == 0 or theta == 0:
        return w.copy()
    u = rng.standard_normal(w.shape)
    u -= (u.ravel() @ w.ravel()) / norm ** 2 * w
    u *= norm / np.linalg.norm(u)
    return np.cos(theta) * w + np.sin(theta) * u


def session_weights(cfg: ForwardModelConfig, session_index: int, channels) -> np.ndarray:
    """Tuning matrix (n_channels, 3) for one session.

    Session 1 uses ``cfg.tuned_channels``; each later session rotates the
    previous weights by ``session_drift * 90`` degrees toward a random
    orthogonal direction inside the online-montage subspace.
    """
    channels = list(channels)
    w = np.zeros((len(channels), 3))
    for ch, vec in cfg.tuned_channels.items():
        if ch in channels:
            w[channels.index(ch)] = vec
    sub = np.array([c in ONLINE17 for c in channels])
    theta = cfg.session_drift * np.pi / 2
    for k in range(2, session_index + 1):
        w[sub] = _rotate(w[sub], theta, substream(cfg.seed, "drift", k))
    return w


# ---------------------------------------------------------------------------
# Session generation
# ---------------------------------------------------------------------------

def _schedule(protocol: Protocol, rng: np.random.Generator) -> list:
    """Per-trial (target, condition) with balanced blocks and alternating runs."""
    out = []
    run = protocol.run_length
    for b in range(protocol.n_trials // protocol.block_size):
        targets = np.repeat(np.arange(4), protocol.block_size // 4)
        rng.shuffle(targets)
        for j, tid in enumerate(targets):
            i = b * protocol.block_size + j
            cond = "executed" if (i // run) % 2 == 0 else "imagined"
            out.append((int(tid), cond))
    return out


def _background(rng, n_ch, n, fs, gamma, rms):
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    amp = np.zeros_like(freqs)
    ok = freqs >= 0.5
    amp[ok] = freqs[ok] ** (-gamma / 2.0)
    spec = amp * (rng.standard_normal((n_ch, freqs.size)) + 1j * rng.standard_normal((n_ch, freqs.size)))
    x = np.fft.irfft(spec, n=n, axis=1)
    x *= rms / x.std(axis=1, keepdims=True)
    return x, freqs, amp ** 2


def default_modality(participant: int, session_index: int) -> str:
    """Alternating modality; odd participants start with VR."""
    first, second = ("vr", "screen") if participant % 2 else ("screen", "vr")
    return first if session_index % 2 else second


def synth_session(cfg: ForwardModelConfig, session_index: int, modality: str | None = None,
                  protocol: Protocol = Protocol(), participant: int = 1) -> SessionDataset:
    """Generate one session. Bit-identical for identical arguments."""
    modality = modality or default_modality(participant, session_index)
    montage = builtin_montage(protocol.montage)
    timing = protocol.timing
    fs = protocol.eeg_rate_hz
    rng = substream(cfg.seed, "participant", participant, "session", session_index)

    sched = _schedule(protocol, rng)
    trials = []
    for i, (tid, cond) in enumerate(sched):
        t0 = protocol.lead_in_s + i * timing.total_s
        b = np.cumsum([t0, timing.rest_s, timing.indication_s, timing.target_s, timing.reset_s])
        trials.append(TrialEvent(i, tid, cond, *(float(round(x, 9)) for x in b)))
    total = protocol.lead_in_s + protocol.n_trials * timing.total_s + protocol.tail_s
    n = int(round(total * fs))
    t_eeg = np.arange(n) / fs
    t_kin = np.arange(int(np.floor(total * protocol.kin_rate_hz)) + 1) / protocol.kin_rate_hz

    targets = np.asarray(protocol.targets, dtype=float)
    T = protocol.reach_duration_s
    axis_peak = 1.875 * np.abs(targets).max(axis=0) / T

    pos = np.zeros((t_kin.size, 3))
    intent = np.zeros((n, 3))
    for ev in trials:
        goal = targets[ev.target_id]
        actual = goal + rng.normal(0.0, protocol.endpoint_jitter_m, 3)
        ret = timing.reset_s
        for ts, out, kind in ((t_kin, pos, "pos"), (t_eeg, intent, "vel")):
            lo = np.searchsorted(ts, ev.t_target_s)
            hi = np.searchsorted(ts, ev.t_end_s)
            tt = ts[lo:hi]
            tau_out = (tt - ev.t_target_s) / T
            tau_back = (tt - ev.t_reset_s) / ret
            if kind == "pos":
                if ev.condition == "executed":
                    out[lo:hi] = (np.outer(_mj_shape(tau_out), actual)
                                  - np.outer(_mj_shape(tau_back), actual))
            else:
                end = actual if ev.condition == "executed" else goal * cfg.imagery_gain
                out[lo:hi] = (np.outer(_mj_rate(tau_out) / T, end)
                              - np.outer(_mj_rate(tau_back) / ret, end))
    v_hat = intent / axis_peak

    w = session_weights(cfg, session_index, montage.channels)
    bg, freqs, psd = _background(rng, len(montage), n, fs, cfg.noise_exponent,
                                 protocol.background_rms_uv)
    band = cfg.carrier_band
    in_band = (freqs >= band.lo_hz) & (freqs <= band.hi_hz)
    band_power = protocol.background_rms_uv ** 2 * psd[in_band].sum() / psd.sum()
    tuned = np.any(w != 0, axis=1)
    moving = np.zeros(n, dtype=bool)
    for ev in trials:
        moving[int(round(ev.t_target_s * fs)):int(round((ev.t_target_s + T) * fs))] = True
    depth = w[tuned] @ v_hat[moving].T if tuned.any() and moving.any() else np.zeros(1)
    mod_power = float(np.mean(depth ** 2))
    amp = np.sqrt(cfg.snr * band_power / mod_power) if mod_power > 0 else 0.0

    f_c = rng.uniform(band.lo_hz + 0.25 * (band.hi_hz - band.lo_hz),
                      band.hi_hz - 0.25 * (band.hi_hz - band.lo_hz), len(montage))
    diffusion = np.pi * 0.5  # rad^2/s, about 0.25 Hz linewidth
    phase0 = rng.uniform(0, 2 * np.pi, len(montage))
    walk = np.cumsum(rng.standard_normal((len(montage), n)) * np.sqrt(diffusion / fs), axis=1)
    carrier = np.sqrt(2.0) * np.cos(2 * np.pi * f_c[:, None] * t_eeg + phase0[:, None] + walk)
    envelope = np.clip(1.0 + w @ v_hat.T, 0.0, None)
    eeg = bg + amp * envelope * carrier
    if cfg.mixing is not None:
        mix = np.asarray(cfg.mixing, dtype=float)
        if mix.shape != (len(montage), len(montage)):
            raise ShapeError("mixing matrix must be n_channels x n_channels")
        eeg = mix @ eeg
    eeg = eeg.astype(np.float32).astype(np.float64)

    return SessionDataset(
        session_index=session_index, modality=modality,
        assistance_fraction=assistance_for_session(session_index),
        montage=montage, eeg=EegStream(fs, eeg, 0.0),
        kin=KinematicStream(t_kin, pos), trials=tuple(trials),
        participant_id=f"P{participant:02d}")


# ---------------------------------------------------------------------------
# Linear-readout oracle
# ---------------------------------------------------------------------------

def band_envelope(data: np.ndarray, fs: float, band: FrequencyBand,
                  smooth_s: float = 0.1) -> np.ndarray:
    """Hilbert amplitude of the band-passed signal, moving-average smoothed."""
    sos = signal.butter(4, [band.lo_hz, band.hi_hz], btype="bandpass", fs=fs, output="sos")
    env = np.abs(signal.hilbert(signal.sosfiltfilt(sos, data, axis=-1), axis=-1))
    k = max(1, int(round(smooth_s * fs)))
    return signal.fftconvolve(env, np.ones((1, k)) / k, mode="same", axes=-1)


def linear_readout_oracle(session: SessionDataset, band: FrequencyBand,
                          step_s: float = 0.016, channels=ONLINE17,
                          cv_folds: int | None = None) -> np.ndarray:
    """Per-axis decoding accuracy of a least-squares envelope readout.

    Regresses the label velocity on the carrier-band envelopes of
    ``channels`` over every scoring-window step, then averages the
    per-trial Pearson r for each axis. With ``cv_folds`` the readout is
    fitted on the other folds of trials (interleaved assignment) instead of
    in-sample.
    """
    from .errors import UndefinedCorrelation
    from .stats import pearson_r

    eeg = session.eeg.pick(session.montage.index(channels))
    env = band_envelope(eeg.data, eeg.sample_rate_hz, band)
    labels = trial_labels(session, step_s, velocity=differentiate_velocity(session.kin))
    feats = []
    for ev, lab in zip(session.trials, labels):
        idx = [eeg.sample_index(ev.t_target_s + k * step_s) for k in range(len(lab))]
        feats.append(np.column_stack([np.ones(len(idx)), env[:, idx].T]))
    n = len(labels)
    fold = np.arange(n) % cv_folds if cv_folds else np.zeros(n, dtype=int)
    preds = [None] * n
    for f in np.unique(fold):
        train = fold != f if cv_folds else np.ones(n, dtype=bool)
        X = np.vstack([feats[i] for i in np.flatnonzero(train)])
        Y = np.vstack([labels[i] for i in np.flatnonzero(train)])
        coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
        for i in np.flatnonzero(fold == f):
            preds[i] = feats[i] @ coef
    rs = np.full((n, 3), np.nan)
    for i, (p, lab) in enumerate(zip(preds, labels)):
        for a in range(3):
            try:
                rs[i, a] = pearson_r(p[:, a], lab[:, a])
            except UndefinedCorrelation:
                pass
    return np.nanmean(rs, axis=0)
