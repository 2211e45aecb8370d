"""ERSP time-frequency images: Morlet power, rest baseline, window stacks.

Frames lie on a 16 ms grid anchored at each trial's movement onset
(``t_target``). A decoding step at time ``s`` sees the 40 most recent
frames ending at ``s``, i.e. the preceding 640 ms.
"""
from __future__ import annotations

import json
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from .core import (ONLINE17, DEFAULT_TIMING, EegStream, SessionDataset,
                   TrialEvent, scoring_steps, trial_labels)
from .errors import (AlignmentError, InsufficientData, InsufficientHistory,
                     InvalidBaseline, ShapeError)

BASELINE_FLOOR = 1e-12


@dataclass(frozen=True)
class ErspConfig:
    freqs_hz: tuple = tuple(range(1, 41))
    hop_s: float = 0.016
    image_width: int = 40
    lookback_s: float = 0.640
    wavelet_cycles: float = 7.0
    baseline: str = "rest"
    scale: str = "db"
    channels: tuple = ONLINE17
    # Gaussian envelope is truncated at this many standard deviations.
    support_sd: float = 3.5

    def __post_init__(self):
        if abs(self.image_width * self.hop_s - self.lookback_s) > 1e-9:
            raise ValueError("image_width * hop_s must equal lookback_s")
        f = np.asarray(self.freqs_hz, dtype=float)
        if f.size == 0 or np.any(f <= 0) or np.any(np.diff(f) <= 0):
            raise ValueError("freqs_hz must be positive and ascending")
        if not self.wavelet_cycles > 0:
            raise ValueError("wavelet_cycles must be positive")

    def as_dict(self) -> dict:
        return {"freqs_hz": list(self.freqs_hz), "hop_s": self.hop_s,
                "image_width": self.image_width, "lookback_s": self.lookback_s,
                "wavelet_cycles": self.wavelet_cycles, "baseline": self.baseline,
                "scale": self.scale, "channels": list(self.channels),
                "support_sd": self.support_sd}


@dataclass(frozen=True)
class ErspVolume:
    """Channels x 40 frequencies x 40 time columns, dB re. rest."""

    step_time_s: float
    images: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 3:
            raise ShapeError("ERSP volume must be channels x freqs x time")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("ERSP volume contains non-finite values")


@dataclass(frozen=True)
class TfPower:
    power: np.ndarray   # channels x freqs x frames
    times_s: np.ndarray
    freqs_hz: np.ndarray
    edge: np.ndarray    # freqs x frames, True where the wavelet left the stream


def morlet(freq: float, fs: float, cycles: float, support_sd: float) -> np.ndarray:
    """Complex Morlet wavelet whose response to a unit cosine at ``freq`` has
    magnitude 1/2 (so power 1/4)."""
    sigma = cycles / (2 * np.pi * freq)
    m = int(np.ceil(support_sd * sigma * fs))
    t = np.arange(-m, m + 1) / fs
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return np.exp(2j * np.pi * freq * t) * g / g.sum()


def tf_power(eeg: EegStream, cfg: ErspConfig = ErspConfig(), times_s=None) -> TfPower:
    """Morlet power ``|x * w_f|^2`` sampled at ``times_s``.

    Without ``times_s`` the frames cover the stream on the hop grid from
    its start. Samples outside the stream are treated as zeros and the
    affected (frequency, frame) cells are flagged in ``edge``.
    """
    fs = eeg.sample_rate_hz
    freqs = np.asarray(cfg.freqs_hz, dtype=float)
    wavelets = [morlet(f, fs, cfg.wavelet_cycles, cfg.support_sd) for f in freqs]
    longest = max(w.size for w in wavelets)
    if eeg.n_samples < longest:
        raise InsufficientData(
            f"stream of {eeg.n_samples} samples is shorter than the longest wavelet ({longest})")
    if times_s is None:
        n_frames = int(np.floor((eeg.duration_s - 1.0 / fs) / cfg.hop_s + 1e-9)) + 1
        times_s = eeg.start_time_s + cfg.hop_s * np.arange(n_frames)
    times_s = np.asarray(times_s, dtype=float)
    idx = np.rint((times_s - eeg.start_time_s) * fs).astype(np.int64)

    half = longest // 2
    lo = int(idx.min()) - half
    hi = int(idx.max()) + half + 1
    seg = np.zeros((eeg.data.shape[0], hi - lo))
    a, b = max(lo, 0), min(hi, eeg.n_samples)
    if b > a:
        seg[:, a - lo:b - lo] = eeg.data[:, a:b]
    nfft = sfft.next_fast_len(seg.shape[1] + longest - 1)
    spec = sfft.fft(seg, nfft, axis=1)
    power = np.empty((seg.shape[0], freqs.size, idx.size))
    edge = np.empty((freqs.size, idx.size), dtype=bool)
    for k, w in enumerate(wavelets):
        m = w.size // 2
        conv = sfft.ifft(spec * sfft.fft(w, nfft), axis=1)
        # full convolution index of the centred output for local sample i is i + m
        c = conv[:, idx - lo + m]
        power[:, k] = c.real ** 2 + c.imag ** 2
        edge[k] = (idx - m < 0) | (idx + m > eeg.n_samples - 1)
    return TfPower(power, times_s, freqs, edge)


def baseline_normalize(power: np.ndarray, rest) -> np.ndarray:
    """Power in dB minus its mean over the rest frames, along the last axis.

    The baseline is averaged in the log domain, so the rest frames of every
    (channel, frequency) row average to exactly 0 dB. ``rest`` is a boolean
    mask or index array selecting baseline frames. Power is floored at
    ``1e-12`` before the logarithm.
    """
    db = 10.0 * np.log10(np.maximum(np.asarray(power, dtype=np.float64), BASELINE_FLOOR))
    sel = db[..., np.asarray(rest)]
    if sel.shape[-1] == 0:
        raise InvalidBaseline("rest range is empty")
    return db - sel.mean(axis=-1, keepdims=True)


def window_stack(ersp: np.ndarray, frame_times_s, step_time_s: float,
                 cfg: ErspConfig = ErspConfig()) -> ErspVolume:
    """The ``image_width`` most recent frames ending at ``step_time_s``,
    oldest first."""
    times = np.asarray(frame_times_s, dtype=float)
    j = int(np.argmin(np.abs(times - step_time_s)))
    if abs(times[j] - step_time_s) > 0.5 * cfg.hop_s:
        raise AlignmentError(f"no frame within half a hop of t={step_time_s}")
    if j + 1 < cfg.image_width:
        raise InsufficientHistory(f"{j + 1} frames available, need {cfg.image_width}")
    return ErspVolume(float(times[j]), ersp[:, :, j + 1 - cfg.image_width:j + 1])


def trial_frame_times(event: TrialEvent, hop_s: float) -> tuple:
    """Frame grid of one trial and the index of the onset frame."""
    j0 = int(np.ceil((event.t_rest_s - event.t_target_s) / hop_s - 1e-9))
    j1 = int(np.floor((event.t_end_s - event.t_target_s) / hop_s + 1e-9))
    js = np.arange(j0, j1 + 1)
    return event.t_target_s + js * hop_s, -j0


def trial_ersp(eeg: EegStream, event: TrialEvent, cfg: ErspConfig = ErspConfig()) -> tuple:
    """Baseline-normalized ERSP frames of one trial.

    Returns ``(frames, times, onset_index)`` with frames as float32
    channels x freqs x n_frames.
    """
    times, onset = trial_frame_times(event, cfg.hop_s)
    tp = tf_power(eeg, cfg, times)
    rest = (times >= event.t_rest_s - 1e-9) & (times < event.t_indication_s - 1e-9)
    return baseline_normalize(tp.power, rest).astype(np.float32), times, onset


# ---------------------------------------------------------------------------
# Training pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairSet(Sequence):
    """Lazy sequence of ``(ErspVolume, velocity)`` pairs.

    Volumes are views into per-trial frame arrays, so a full session costs
    one frame array per trial rather than one 40-column image per step.
    Pair ``i`` belongs to trial ``trial_of[i]`` and ends at frame
    ``end_frame[i]`` of that trial.
    """

    frames: tuple                   # per trial: channels x freqs x n_frames float32
    onset_index: np.ndarray         # per trial: frame index of t_target
    events: tuple
    labels: tuple                   # per trial: n_steps x 3
    hop_s: float = 0.016
    width: int = 40
    trial_of: np.ndarray = field(init=False, repr=False)
    step_of: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (len(self.frames) == len(self.events) == len(self.labels) == len(self.onset_index)):
            raise ShapeError("frames, events, labels and onsets must align per trial")
        counts = [len(lab) for lab in self.labels]
        trial_of = np.repeat(np.arange(len(counts)), counts)
        step_of = np.concatenate([np.arange(c) for c in counts]) if counts else np.zeros(0, int)
        object.__setattr__(self, "trial_of", trial_of)
        object.__setattr__(self, "step_of", step_of.astype(int))
        for fr, on, lab in zip(self.frames, self.onset_index, self.labels):
            if on + 1 < self.width or on + len(lab) > fr.shape[-1]:
                raise AlignmentError("label grid extends beyond the trial's ERSP frames")

    def __len__(self):
        return int(self.trial_of.size)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        tr, st = int(self.trial_of[i]), int(self.step_of[i])
        end = int(self.onset_index[tr]) + st
        ev = self.events[tr]
        vol = ErspVolume(ev.t_target_s + st * self.hop_s,
                         self.frames[tr][:, :, end + 1 - self.width:end + 1])
        return vol, self.labels[tr][st]

    @property
    def end_frame(self) -> np.ndarray:
        return np.asarray(self.onset_index)[self.trial_of] + self.step_of

    @property
    def n_trials(self) -> int:
        return len(self.events)

    @property
    def targets(self) -> np.ndarray:
        return np.array([ev.target_id for ev in self.events], dtype=int)

    @property
    def input_shape(self) -> tuple:
        c, f = self.frames[0].shape[:2]
        return (c, f, self.width)

    def label_array(self) -> np.ndarray:
        return np.vstack(self.labels) if self.labels else np.zeros((0, 3))

    def subset(self, trials) -> PairSet:
        """Pairs of the selected trial positions (not trial_index values)."""
        trials = [int(t) for t in trials]
        return PairSet(tuple(self.frames[t] for t in trials),
                       np.asarray(self.onset_index)[trials] if trials else np.zeros(0, int),
                       tuple(self.events[t] for t in trials),
                       tuple(self.labels[t] for t in trials), self.hop_s, self.width)


def build_training_pairs(session: SessionDataset, cfg: ErspConfig = ErspConfig(),
                         labels=None, window_s: float = DEFAULT_TIMING.scoring_window_s) -> PairSet:
    """One pair per 16 ms step inside each trial's scoring window.

    ``labels`` defaults to :func:`trial_labels`, which substitutes the
    executed-kinematics template for imagined trials.
    """
    n_steps = scoring_steps(window_s, cfg.hop_s)
    if not session.trials:
        return PairSet((), np.zeros(0, int), (), (), cfg.hop_s, cfg.image_width)
    if labels is None:
        labels = trial_labels(session, cfg.hop_s, window_s)
    if len(labels) != len(session.trials):
        raise AlignmentError("one label array per trial required")
    eeg = session.eeg.pick(session.montage.index(cfg.channels))
    frames, onsets = [], []
    for ev, lab in zip(session.trials, labels):
        if len(lab) != n_steps:
            raise AlignmentError(f"trial {ev.trial_index}: {len(lab)} labels, grid has {n_steps} steps")
        fr, _, onset = trial_ersp(eeg, ev, cfg)
        frames.append(fr)
        onsets.append(onset)
    return PairSet(tuple(frames), np.asarray(onsets), tuple(session.trials),
                   tuple(np.asarray(lab, dtype=np.float64) for lab in labels),
                   cfg.hop_s, cfg.image_width)


# ---------------------------------------------------------------------------
# Cache file
# ---------------------------------------------------------------------------

_MAGIC = b"ERSPCACH"


def write_ersp_cache(pairs: PairSet, path, meta: dict | None = None) -> Path:
    """Header (channels, freqs, hop, count, ...) + little-endian float32 frames.

    Layout: 8-byte magic, uint32 header length, UTF-8 JSON header, then one
    ``channels x freqs x n_frames`` float32 block per trial.
    """
    path = Path(path)
    header = {
        "format_version": 1,
        "channels": int(pairs.frames[0].shape[0]) if pairs.frames else 0,
        "freqs": int(pairs.frames[0].shape[1]) if pairs.frames else 0,
        "hop_s": pairs.hop_s,
        "count": pairs.n_trials,
        "width": pairs.width,
        "n_frames": [int(f.shape[-1]) for f in pairs.frames],
        "onset_index": [int(o) for o in pairs.onset_index],
        "trial_index": [ev.trial_index for ev in pairs.events],
        **(meta or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(blob)) + blob)
        for fr in pairs.frames:
            fh.write(np.ascontiguousarray(fr, dtype="<f4").tobytes())
    return path


def read_ersp_cache(path, session: SessionDataset, labels=None) -> PairSet:
    """Rebuild a :class:`PairSet` from a cache file and its session."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ShapeError(f"{path} is not an ERSP cache")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    off = 12 + n
    c, f = header["channels"], header["freqs"]
    frames = []
    for nf in header["n_frames"]:
        size = c * f * nf
        frames.append(np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(c, f, nf))
        off += 4 * size
    by_index = {ev.trial_index: ev for ev in session.trials}
    try:
        events = tuple(by_index[i] for i in header["trial_index"])
    except KeyError:
        raise AlignmentError("cache does not match the session's trials") from None
    if labels is None:
        all_labels = trial_labels(session, header["hop_s"])
        pos = {ev.trial_index: k for k, ev in enumerate(session.trials)}
        labels = [all_labels[pos[i]] for i in header["trial_index"]]
    return PairSet(tuple(frames), np.asarray(header["onset_index"]), events,
                   tuple(np.asarray(lab, dtype=np.float64) for lab in labels),
                   header["hop_s"], header["width"])


def read_ersp_header(path) -> dict:
    raw = Path(path).read_bytes()[:1 << 20]
    (n,) = struct.unpack("<I", raw[8:12])
    return json.loads(raw[12:12 + n])
