"""Sensor-space EIC connectivity, max-statistic permutation test, band-power topography.

EIC here is the window-averaged magnitude of imaginary coherency. Each
1.5 s epoch is cut into 0.5 s Hann windows with 50% overlap; the
cross-spectral density of a window is averaged over trials, turned into
coherency per frequency bin, averaged (as complex numbers) over the
band's bins, and ``|Im|`` is averaged over windows.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .core import FrequencyBand, SessionDataset
from .errors import InsufficientData, InvalidBand, ShapeError

EPOCH_S = 1.5
WINDOW_S = 0.5
DISPLAY_THRESHOLD = 0.55
POWER_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Epochs and filtering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochPair:
    task: np.ndarray        # trials x channels x samples
    baseline: np.ndarray
    sample_rate_hz: float
    channels: tuple = ()

    def __post_init__(self):
        if self.task.ndim != 3 or self.task.shape != self.baseline.shape:
            raise ShapeError(f"task {self.task.shape} and baseline {self.baseline.shape} must match")
        if self.channels and len(self.channels) != self.task.shape[1]:
            raise ShapeError("channel labels do not match the epoch channel count")


def extract_epochs(session: SessionDataset, channels=None, condition: str | None = None,
                   length_s: float = EPOCH_S) -> EpochPair:
    """Reach epoch ``[t_target, t_target + 1.5 s)`` and the last 1.5 s of rest."""
    chans = tuple(channels or session.montage.channels)
    eeg = session.eeg.pick(session.montage.index(chans))
    n = int(round(length_s * eeg.sample_rate_hz))
    task, base = [], []
    for ev in session.trials:
        if condition and ev.condition != condition:
            continue
        a = eeg.sample_index(ev.t_target_s)
        b = eeg.sample_index(ev.t_indication_s) - n
        if b < 0 or a + n > eeg.n_samples:
            raise InsufficientData(f"trial {ev.trial_index}: epoch outside the recording")
        task.append(eeg.data[:, a:a + n])
        base.append(eeg.data[:, b:b + n])
    if not task:
        raise InsufficientData("no trials selected")
    return EpochPair(np.stack(task), np.stack(base), eeg.sample_rate_hz, chans)


def bandpass(epochs, band: FrequencyBand, fs: float, order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth along the last axis; delta (lo=0) is a low-pass."""
    nyq = fs / 2.0
    if band.hi_hz >= nyq:
        raise InvalidBand(f"{band.name} upper edge {band.hi_hz} Hz >= Nyquist {nyq} Hz")
    if band.lo_hz <= 0:
        sos = signal.butter(order, band.hi_hz, btype="lowpass", fs=fs, output="sos")
    else:
        sos = signal.butter(order, [band.lo_hz, band.hi_hz], btype="bandpass", fs=fs, output="sos")
    return signal.sosfiltfilt(sos, np.asarray(epochs, dtype=float), axis=-1)


# ---------------------------------------------------------------------------
# EIC
# ---------------------------------------------------------------------------

def _window_spectra(epochs, fs, band, window_s=WINDOW_S):
    """Hann-windowed spectra at the band's bins: (trials, windows, bins, channels)."""
    x = np.asarray(epochs, dtype=float)
    if x.ndim == 2:
        x = x[None]
    seg = int(round(window_s * fs))
    step = seg // 2
    n = x.shape[-1]
    n_win = 1 + (n - seg) // step if n >= seg else 0
    if n_win < 2:
        raise InsufficientData(f"{n} samples give {n_win} analysis windows, need >= 2")
    freqs = np.fft.rfftfreq(seg, 1.0 / fs)
    sel = (freqs > 0) & (freqs >= band.lo_hz) & (freqs <= band.hi_hz)
    if not sel.any():
        raise InvalidBand(f"no frequency bins inside {band.name}")
    starts = step * np.arange(n_win)
    wins = np.stack([x[..., s:s + seg] for s in starts], axis=1)      # t, w, c, seg
    wins = wins - wins.mean(axis=-1, keepdims=True)
    spec = np.fft.rfft(wins * signal.windows.hann(seg, sym=False), axis=-1)[..., sel]
    return spec.transpose(0, 1, 3, 2)                                  # t, w, b, c


def _cross(spec):
    """Per-trial cross products X X^H: (trials, windows, bins, c, c)."""
    return spec[..., :, None] * spec[..., None, :].conj()


def _eic_from_csd(csd):
    """EIC matrix from a trial-averaged CSD (..., windows, bins, c, c)."""
    d = np.maximum(np.real(np.diagonal(csd, axis1=-2, axis2=-1)), POWER_FLOOR)
    coh = csd / np.sqrt(d[..., :, None] * d[..., None, :])
    eic = np.abs(coh.mean(axis=-3).imag).mean(axis=-3)
    idx = np.arange(eic.shape[-1])
    eic[..., idx, idx] = 0.0
    return eic


def eic_matrix(epochs, band: FrequencyBand, fs: float, window_s: float = WINDOW_S) -> np.ndarray:
    """Symmetric channel x channel EIC of ``(trials, channels, samples)`` epochs."""
    spec = _window_spectra(epochs, fs, band, window_s)
    csd = np.einsum("twbi,twbj->wbij", spec, spec.conj()) / spec.shape[0]
    return _eic_from_csd(csd)


def eic_pair(x, y, band: FrequencyBand, fs: float, window_s: float = WINDOW_S) -> float:
    """EIC between two signals given as ``(trials, samples)`` or ``(samples,)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise ShapeError("x and y must have the same shape")
    return float(eic_matrix(np.stack([x, y], axis=1), band, fs, window_s)[0, 1])


# ---------------------------------------------------------------------------
# Permutation test
# ---------------------------------------------------------------------------

@dataclass
class ConnectivityResult:
    band: str
    channels: tuple
    eic_task: np.ndarray
    eic_base: np.ndarray
    eic_diff: np.ndarray
    significant: np.ndarray
    displayed: np.ndarray
    threshold: float
    null_max: np.ndarray = field(repr=False)
    n_perm: int = 0
    alpha: float = 0.05
    low_perm_warning: bool = False

    def __post_init__(self):
        assert not np.any(self.displayed & ~self.significant), "displayed edges must be significant"

    def null_quantiles(self, qs=(0.5, 0.9, 0.95, 0.99)) -> dict:
        return {q: float(np.quantile(self.null_max, q)) for q in qs}


def permutation_test(task, baseline, band: FrequencyBand, fs: float, n_perm: int = 1000,
                     alpha: float = 0.05, seed: int = 0, channels=(),
                     display_threshold: float = DISPLAY_THRESHOLD, workers: int = 1,
                     batch: int = 50) -> ConnectivityResult:
    """Max-statistic permutation test of ``EIC_task - EIC_base`` per channel pair.

    Each permutation swaps the task and baseline epochs of every trial
    independently with probability 1/2 and records the largest ``|diff|``
    over all pairs. A pair is significant when its observed ``|diff|``
    exceeds the ``1 - alpha`` quantile of that null. Permutation ``p`` draws
    its swaps from ``default_rng([seed, p])``, so results do not depend on
    ``workers`` or ``batch``.
    """
    task = np.asarray(task, dtype=float)
    baseline = np.asarray(baseline, dtype=float)
    if task.shape != baseline.shape or task.ndim != 3:
        raise ShapeError("task and baseline must both be trials x channels x samples")
    n_tr, n_ch = task.shape[:2]
    pt = _cross(_window_spectra(task, fs, band))
    qt = _cross(_window_spectra(baseline, fs, band))
    shape = pt.shape[1:]
    p_mean, q_mean = pt.mean(axis=0), qt.mean(axis=0)
    delta = (qt - pt).reshape(n_tr, -1)
    eic_t, eic_b = _eic_from_csd(p_mean), _eic_from_csd(q_mean)
    diff = eic_t - eic_b
    iu = np.triu_indices(n_ch, 1)

    def run(start):
        ps = range(start, min(start + batch, n_perm))
        m = np.stack([np.random.default_rng([seed, p]).integers(0, 2, n_tr) for p in ps])
        shift = (m @ delta / n_tr).reshape(len(ps), *shape)
        d = _eic_from_csd(p_mean + shift) - _eic_from_csd(q_mean - shift)
        return np.abs(d[:, iu[0], iu[1]]).max(axis=1)

    starts = list(range(0, n_perm, batch))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    null = np.concatenate(parts) if parts else np.zeros(0)
    thr = float(np.quantile(null, 1 - alpha)) if null.size else math.inf
    sig = np.abs(diff) > thr
    np.fill_diagonal(sig, False)
    shown = sig & (diff > display_threshold)
    return ConnectivityResult(band.name, tuple(channels), eic_t, eic_b, diff, sig, shown, thr,
                              null, n_perm, alpha, n_perm < 100)


# ---------------------------------------------------------------------------
# Topography
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TopoResult:
    band: str
    channels: tuple
    db: np.ndarray
    floored: bool = False


def band_power_topo(pairs, band: FrequencyBand, channels=()) -> TopoResult:
    """Movement-minus-rest band power per channel in dB.

    ``pairs`` is one :class:`EpochPair` or a list of them (sessions); each
    session's dB map is computed from trial-averaged powers and the maps
    are averaged across sessions.
    """
    pairs = [pairs] if isinstance(pairs, EpochPair) else list(pairs)
    if not pairs:
        raise InsufficientData("no epochs supplied")
    maps, floored = [], False
    for ep in pairs:
        pt = np.mean(bandpass(ep.task, band, ep.sample_rate_hz) ** 2, axis=(0, 2))
        pb = np.mean(bandpass(ep.baseline, band, ep.sample_rate_hz) ** 2, axis=(0, 2))
        floored |= bool(np.any(pb < POWER_FLOOR) or np.any(pt < POWER_FLOOR))
        maps.append(10 * np.log10(np.maximum(pt, POWER_FLOOR) / np.maximum(pb, POWER_FLOOR)))
    chans = tuple(channels or pairs[0].channels)
    return TopoResult(band.name, chans, np.mean(maps, axis=0), floored)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

EDGE_HEADER = ["band", "ch_a", "ch_b", "eic_task", "eic_base", "diff", "significant", "displayed"]
TOPO_HEADER = ["band", "channel", "db"]


def edges_csv(results: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EDGE_HEADER)
    for res in results:
        n = res.eic_diff.shape[0]
        labels = res.channels or tuple(str(i) for i in range(n))
        for i, j in zip(*np.triu_indices(n, 1)):
            w.writerow([res.band, labels[i], labels[j], repr(float(res.eic_task[i, j])),
                        repr(float(res.eic_base[i, j])), repr(float(res.eic_diff[i, j])),
                        int(res.significant[i, j]), int(res.displayed[i, j])])
    return buf.getvalue()


def topo_csv(results: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TOPO_HEADER)
    for res in results:
        for ch, v in zip(res.channels, res.db):
            w.writerow([res.band, ch, repr(float(v))])
    return buf.getvalue()


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.write_text(text)
    return path
