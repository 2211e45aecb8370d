"""Domain types for sessions, trials, montages and kinematics.

All containers are frozen dataclasses whose array fields are made read-only
on construction, so a value can be shared between threads without copies.
Times are seconds on a per-session clock that starts at 0.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (InsufficientData, InvalidTimestamps, OutOfBounds,
                     ShapeError)

AXES = ("x", "y", "z")
CONDITIONS = ("executed", "imagined")
MODALITIES = ("screen", "vr")

# Slack used when comparing event times against sample grids.
TIME_EPS = 1e-9


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator keyed by ``seed`` and a path of names/ints."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for n in names:
        key.append(n if isinstance(n, int) else zlib.crc32(str(n).encode()))
    return np.random.default_rng(key)


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Montages and bands
# ---------------------------------------------------------------------------

ONLINE17 = ("F3", "FZ", "F4", "FC5", "FC1", "FC2", "FC6", "C3", "CZ", "C4",
            "CP5", "CP1", "CP2", "CP6", "P3", "PZ", "P4")

FC32 = ("C3", "C4", "AF3", "T7", "F7", "F3", "FZ", "F4", "T8", "FC5", "FC1",
        "FC2", "FC6", "AF4", "PO7", "PO8", "CZ", "F8", "CP5", "CP1", "CP2",
        "CP6", "P7", "P3", "PZ", "P4", "P8", "CP3", "PO3", "PO4", "OZ", "CP4")

# Approximate azimuthal projection, head radius 1 at the ear line.
_POSITIONS = {
    "AF3": (-0.22, 0.60), "AF4": (0.22, 0.60),
    "F7": (-0.65, 0.47), "F3": (-0.31, 0.39), "FZ": (0.0, 0.40),
    "F4": (0.31, 0.39), "F8": (0.65, 0.47),
    "FC5": (-0.56, 0.22), "FC1": (-0.18, 0.20), "FC2": (0.18, 0.20),
    "FC6": (0.56, 0.22),
    "T7": (-0.80, 0.0), "C3": (-0.40, 0.0), "CZ": (0.0, 0.0),
    "C4": (0.40, 0.0), "T8": (0.80, 0.0),
    "CP5": (-0.56, -0.22), "CP3": (-0.38, -0.20), "CP1": (-0.18, -0.20),
    "CP2": (0.18, -0.20), "CP4": (0.38, -0.20), "CP6": (0.56, -0.22),
    "P7": (-0.65, -0.47), "P3": (-0.31, -0.39), "PZ": (0.0, -0.40),
    "P4": (0.31, -0.39), "P8": (0.65, -0.47),
    "PO7": (-0.45, -0.68), "PO3": (-0.22, -0.60), "PO4": (0.22, -0.60),
    "PO8": (0.45, -0.68), "OZ": (0.0, -0.80),
}


@dataclass(frozen=True)
class Montage:
    """Ordered list of channel labels with optional 2D scalp positions."""

    name: str
    channels: tuple
    positions: np.ndarray | None = None

    def __post_init__(self):
        chans = tuple(str(c) for c in self.channels)
        if len(set(chans)) != len(chans):
            raise ShapeError(f"duplicate channel labels in montage {self.name!r}")
        object.__setattr__(self, "channels", chans)
        if self.positions is not None:
            pos = _frozen(self.positions)
            if pos.shape != (len(chans), 2):
                raise ShapeError("positions must be (n_channels, 2)")
            object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.channels)

    def index(self, labels: Sequence[str]) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.channels)}
        try:
            return np.array([lookup[c] for c in labels], dtype=int)
        except KeyError as exc:
            raise ShapeError(f"channel {exc.args[0]} not in montage {self.name!r}") from None

    def subset(self, labels: Sequence[str], name: str | None = None) -> Montage:
        idx = self.index(labels)
        pos = None if self.positions is None else self.positions[idx]
        return Montage(name or self.name, tuple(labels), pos)


def builtin_montage(name: str) -> Montage:
    """Return the ``online17`` or ``fc32`` montage."""
    chans = {"online17": ONLINE17, "fc32": FC32}.get(name)
    if chans is None:
        raise KeyError(f"unknown montage {name!r}")
    return Montage(name, chans, np.array([_POSITIONS[c] for c in chans]))


@dataclass(frozen=True)
class FrequencyBand:
    name: str
    lo_hz: float
    hi_hz: float

    def __post_init__(self):
        if not (0.0 <= self.lo_hz < self.hi_hz):
            raise ValueError(f"band {self.name!r} needs 0 <= lo < hi")


CANONICAL_BANDS = (
    FrequencyBand("delta", 0.0, 4.0),
    FrequencyBand("theta", 4.0, 8.0),
    FrequencyBand("alpha", 8.0, 12.0),
    FrequencyBand("low-beta", 12.0, 18.0),
    FrequencyBand("high-beta", 18.0, 28.0),
    FrequencyBand("gamma", 28.0, 40.0),
)


def band_by_name(name: str) -> FrequencyBand:
    for band in CANONICAL_BANDS:
        if band.name == name:
            return band
    raise KeyError(f"unknown band {name!r}")


# ---------------------------------------------------------------------------
# Streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EegStream:
    """Channels x samples EEG in microvolts."""

    sample_rate_hz: float
    data: np.ndarray
    start_time_s: float = 0.0

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        data = _frozen(self.data)
        if data.ndim != 2:
            raise ShapeError("EEG data must be channels x samples")
        if not np.all(np.isfinite(data)):
            raise ValueError("EEG contains non-finite samples")
        object.__setattr__(self, "data", data)

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    @property
    def end_time_s(self) -> float:
        return self.start_time_s + self.duration_s

    def sample_index(self, t: float) -> int:
        return int(round((t - self.start_time_s) * self.sample_rate_hz))

    def pick(self, idx) -> EegStream:
        return EegStream(self.sample_rate_hz, self.data[np.asarray(idx)], self.start_time_s)


@dataclass(frozen=True)
class KinematicStream:
    """Wrist positions in metres; x lateral, y vertical, z forward."""

    timestamps_s: np.ndarray
    positions_m: np.ndarray

    def __post_init__(self):
        t = _frozen(self.timestamps_s)
        p = _frozen(self.positions_m)
        if t.ndim != 1 or p.ndim != 2 or p.shape != (t.size, 3):
            raise ShapeError("kinematics need timestamps (N,) and positions (N, 3)")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p))):
            raise ValueError("kinematics contain non-finite values")
        object.__setattr__(self, "timestamps_s", t)
        object.__setattr__(self, "positions_m", p)

    def __len__(self):
        return self.timestamps_s.size

    def check_rate(self, nominal_hz: float = 60.0, jitter: float = 0.25) -> None:
        """Raise if any interval deviates from ``1/nominal_hz`` by more than
        the fractional ``jitter``."""
        dt = np.diff(self.timestamps_s)
        if dt.size and np.max(np.abs(dt * nominal_hz - 1.0)) > jitter:
            raise InvalidTimestamps(f"sampling deviates from {nominal_hz} Hz beyond jitter {jitter}")


@dataclass(frozen=True)
class VelocityTrack:
    timestamps_s: np.ndarray
    velocities_mps: np.ndarray

    def __post_init__(self):
        t = _frozen(self.timestamps_s)
        v = _frozen(self.velocities_mps)
        if t.ndim != 1 or v.ndim != 2 or v.shape[0] != t.size:
            raise ShapeError("velocity track needs timestamps (N,) and velocities (N, d)")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ValueError("velocity track contains non-finite values")
        object.__setattr__(self, "timestamps_s", t)
        object.__setattr__(self, "velocities_mps", v)

    def __len__(self):
        return self.timestamps_s.size


# ---------------------------------------------------------------------------
# Trials and sessions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrialTiming:
    """Phase durations of one trial (rest, indication, target, reset)."""

    rest_s: float = 2.5
    indication_s: float = 1.6
    target_s: float = 2.5
    reset_s: float = 1.0
    scoring_window_s: float = 2.0

    @property
    def total_s(self) -> float:
        return self.rest_s + self.indication_s + self.target_s + self.reset_s


DEFAULT_TIMING = TrialTiming()


@dataclass(frozen=True)
class TrialEvent:
    trial_index: int
    target_id: int
    condition: str
    t_rest_s: float
    t_indication_s: float
    t_target_s: float
    t_reset_s: float
    t_end_s: float

    def __post_init__(self):
        if self.target_id not in (0, 1, 2, 3):
            raise ValueError(f"target_id must be 0..3, got {self.target_id}")
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}")
        if not (self.t_rest_s < self.t_indication_s < self.t_target_s
                < self.t_reset_s < self.t_end_s):
            raise InvalidTimestamps(f"trial {self.trial_index}: phase boundaries out of order")

    @property
    def boundaries(self) -> tuple:
        return (self.t_rest_s, self.t_indication_s, self.t_target_s,
                self.t_reset_s, self.t_end_s)

    @property
    def scoring_window(self) -> tuple:
        return (self.t_target_s, self.t_target_s + DEFAULT_TIMING.scoring_window_s)


def check_trial_timing(event: TrialEvent, timing: TrialTiming = DEFAULT_TIMING,
                       tol_s: float = 1e-3) -> None:
    expected = (timing.rest_s, timing.indication_s, timing.target_s, timing.reset_s)
    got = np.diff(event.boundaries)
    if np.max(np.abs(got - expected)) > tol_s:
        raise InvalidTimestamps(
            f"trial {event.trial_index}: phase durations {np.round(got, 4).tolist()} "
            f"differ from {list(expected)} by more than {tol_s} s")


ASSISTANCE_SCHEDULE = {1: 1.00, 2: 1.00, 3: 0.65, 4: 0.65, 5: 0.60, 6: 0.60,
                       7: 0.50, 8: 0.50, 9: 0.40, 10: 0.40}


def assistance_for_session(session_index: int) -> float:
    return ASSISTANCE_SCHEDULE[session_index]


@dataclass(frozen=True)
class SessionDataset:
    session_index: int
    modality: str
    assistance_fraction: float
    montage: Montage
    eeg: EegStream
    kin: KinematicStream
    trials: tuple
    participant_id: str = "P01"
    timing_tolerance_s: float = 1e-3

    def __post_init__(self):
        if not 1 <= self.session_index <= 10:
            raise ValueError("session_index must be in 1..10")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if not 0.0 <= self.assistance_fraction <= 1.0:
            raise ValueError("assistance_fraction must be in [0, 1]")
        if self.eeg.data.shape[0] != len(self.montage):
            raise ShapeError(
                f"EEG has {self.eeg.data.shape[0]} rows, montage has {len(self.montage)}")
        object.__setattr__(self, "trials", tuple(self.trials))
        for ev in self.trials:
            check_trial_timing(ev, tol_s=self.timing_tolerance_s)


def check_protocol(session: SessionDataset, n_trials: int = 256,
                   block_size: int = 16) -> None:
    """Assert the protocol-level invariants of a generated session.

    Raises ``AssertionError`` naming the first violated rule.
    """
    trials = session.trials
    assert len(trials) == n_trials, f"{len(trials)} trials, expected {n_trials}"
    assert n_trials % block_size == 0
    n_exec = sum(t.condition == "executed" for t in trials)
    if n_trials >= 32:
        assert n_exec == n_trials // 2, f"{n_exec} executed trials"
    for b in range(0, n_trials, block_size):
        counts = np.bincount([t.target_id for t in trials[b:b + block_size]], minlength=4)
        assert np.all(counts == block_size // 4), f"block {b // block_size}: {counts}"
    expected = ASSISTANCE_SCHEDULE[session.session_index]
    assert session.assistance_fraction == expected


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def differentiate_velocity(kin: KinematicStream) -> VelocityTrack:
    """First-order backward difference of wrist position.

    ``v_i = (p_i - p_{i-1}) / (t_i - t_{i-1})`` for ``i = 1..N-1``; sample
    ``i`` is stamped with ``t_i``, so the track is one sample shorter than
    the input.
    """
    t = kin.timestamps_s
    if t.size < 2:
        raise InsufficientData("need at least 2 kinematic samples")
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise InvalidTimestamps("timestamps must be strictly increasing")
    v = np.diff(kin.positions_m, axis=0) / dt[:, None]
    return VelocityTrack(t[1:], v)


def resample_to_grid(track: VelocityTrack, step_s: float, start_s: float | None = None,
                     stop_s: float | None = None) -> VelocityTrack:
    """Linearly interpolate ``track`` onto a uniform grid.

    The grid starts at the first timestamp unless ``start_s`` is given and
    runs to the last timestamp (or ``stop_s``); values outside the track
    are clamped to the end samples.
    """
    if not step_s > 0:
        raise ValueError("step_s must be positive")
    if len(track) == 0:
        raise InsufficientData("cannot resample an empty track")
    t = track.timestamps_s
    t0 = t[0] if start_s is None else start_s
    t1 = t[-1] if stop_s is None else stop_s
    n = int(np.floor((t1 - t0) / step_s + 1e-6)) + 1 if t1 >= t0 else 0
    grid = t0 + step_s * np.arange(n)
    v = track.velocities_mps
    out = np.column_stack([np.interp(grid, t, v[:, k]) for k in range(v.shape[1])]) \
        if n else np.zeros((0, v.shape[1]))
    return VelocityTrack(grid, out)


PHASES = ("rest", "indication", "target", "reset")


@dataclass(frozen=True)
class TrialView:
    """Per-trial slices of one session.

    ``eeg_ranges`` and ``kin_ranges`` map phase names (plus ``"trial"`` and
    ``"scoring"``) to half-open sample ranges ``(start, stop)`` in the
    session's EEG samples and velocity samples respectively.
    """

    event: TrialEvent
    eeg_ranges: Mapping[str, tuple]
    vel_ranges: Mapping[str, tuple]
    eeg: np.ndarray = field(repr=False)
    velocity: VelocityTrack = field(repr=False)

    def eeg_phase(self, name: str, session_eeg: EegStream) -> np.ndarray:
        a, b = self.eeg_ranges[name]
        return session_eeg.data[:, a:b]


def _vel_range(ts: np.ndarray, a: float, b: float) -> tuple:
    return (int(np.searchsorted(ts, a - TIME_EPS, "left")),
            int(np.searchsorted(ts, b - TIME_EPS, "left")))


def segment_trials(session: SessionDataset, velocity: VelocityTrack | None = None,
                   scoring_window_s: float = DEFAULT_TIMING.scoring_window_s) -> list:
    """Split a session into per-trial views.

    The scoring window is ``[t_target, t_target + scoring_window_s)``.
    Raises ``OutOfBounds`` when a trial extends past either stream.
    """
    eeg = session.eeg
    vel = velocity if velocity is not None else differentiate_velocity(session.kin)
    ts = vel.timestamps_s
    k0, k1 = session.kin.timestamps_s[0], session.kin.timestamps_s[-1]
    tol = 0.5 / eeg.sample_rate_hz
    views = []
    for ev in session.trials:
        if ev.t_rest_s < eeg.start_time_s - tol or ev.t_end_s > eeg.end_time_s + tol:
            raise OutOfBounds(f"trial {ev.trial_index} outside EEG "
                              f"[{eeg.start_time_s}, {eeg.end_time_s}] s")
        if ev.t_rest_s < k0 - TIME_EPS or ev.t_end_s > k1 + 0.5:
            raise OutOfBounds(f"trial {ev.trial_index} outside kinematics")
        b = ev.boundaries
        spans = dict(zip(PHASES, zip(b[:-1], b[1:])))
        spans["trial"] = (b[0], b[-1])
        spans["scoring"] = (ev.t_target_s, ev.t_target_s + scoring_window_s)
        eeg_r = {k: (eeg.sample_index(a), eeg.sample_index(c)) for k, (a, c) in spans.items()}
        vel_r = {k: _vel_range(ts, a, c) for k, (a, c) in spans.items()}
        a, c = eeg_r["trial"]
        va, vc = vel_r["trial"]
        views.append(TrialView(ev, eeg_r, vel_r, eeg.data[:, a:c],
                               VelocityTrack(ts[va:vc], vel.velocities_mps[va:vc])))
    return views


def scoring_steps(window_s: float, step_s: float) -> int:
    """Number of decoding steps that start inside a scoring window."""
    return int(np.floor(window_s / step_s + 1e-6))


def trial_labels(session: SessionDataset, step_s: float = 0.016,
                 window_s: float = DEFAULT_TIMING.scoring_window_s,
                 velocity: VelocityTrack | None = None) -> list:
    """Velocity labels on each trial's decoding grid.

    The grid is ``t_target + k * step_s`` for every step inside the scoring
    window. Executed trials take their own differentiated kinematics;
    imagined trials take the mean executed label sequence for the same
    target in this session.
    """
    from .errors import AlignmentError

    vel = velocity if velocity is not None else differentiate_velocity(session.kin)
    n = scoring_steps(window_s, step_s)
    ts = vel.timestamps_s
    slack = float(np.max(np.diff(ts))) if ts.size > 1 else 0.0
    own = []
    for ev in session.trials:
        t0 = ev.t_target_s
        t1 = t0 + (n - 1) * step_s
        if t0 < ts[0] - slack or t1 > ts[-1] + slack:
            raise AlignmentError(f"trial {ev.trial_index}: label grid not covered by kinematics")
        own.append(resample_to_grid(vel, step_s, t0, t1 + 0.5 * step_s).velocities_mps[:n])

    templates = {}
    for tid in range(4):
        rows = [lab for lab, ev in zip(own, session.trials)
                if ev.condition == "executed" and ev.target_id == tid]
        if rows:
            templates[tid] = np.mean(rows, axis=0)
    labels = []
    for lab, ev in zip(own, session.trials):
        if ev.condition == "executed":
            labels.append(lab)
        elif ev.target_id in templates:
            labels.append(templates[ev.target_id].copy())
        else:
            raise InsufficientData(
                f"imagined trial {ev.trial_index} has no executed template for target {ev.target_id}")
    return labels
