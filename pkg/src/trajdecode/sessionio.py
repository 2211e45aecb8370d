"""Read and write the on-disk session directory format.

A session directory holds::

    session.json   metadata (participant, session index, modality, montage, rates)
    eeg.f32        little-endian float32, channel-major
    kin.csv        header ``t,x,y,z``
    events.csv     header ``trial,target,condition,t_rest,t_indication,t_target,t_reset,t_end``
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import (EegStream, KinematicStream, Montage, SessionDataset,
                   TrialEvent, builtin_montage)
from .errors import MissingData, ShapeError

FORMAT_VERSION = 1
EVENT_HEADER = ["trial", "target", "condition", "t_rest", "t_indication",
                "t_target", "t_reset", "t_end"]


def _num(x: float) -> str:
    return repr(float(x))


def write_session(session: SessionDataset, path, extra: dict | None = None) -> Path:
    """Write ``session.json``, ``eeg.f32``, ``kin.csv`` and ``events.csv``.

    ``extra`` is stored under ``provenance`` (e.g. the generating config hash).
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "participant_id": session.participant_id,
        "session_index": session.session_index,
        "modality": session.modality,
        "assistance_fraction": session.assistance_fraction,
        "montage": {"name": session.montage.name, "channels": list(session.montage.channels)},
        "eeg": {"sample_rate_hz": session.eeg.sample_rate_hz,
                "start_time_s": session.eeg.start_time_s,
                "n_channels": int(session.eeg.data.shape[0]),
                "n_samples": int(session.eeg.n_samples),
                "file": "eeg.f32"},
        "kin_file": "kin.csv",
        "events_file": "events.csv",
    }
    if extra:
        meta["provenance"] = dict(extra)
    (path / "session.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    session.eeg.data.astype("<f4").tofile(path / "eeg.f32")
    with open(path / "kin.csv", "w", newline="") as fh:
        fh.write("t,x,y,z\n")
        for t, p in zip(session.kin.timestamps_s, session.kin.positions_m):
            fh.write(",".join(_num(v) for v in (t, *p)) + "\n")
    with open(path / "events.csv", "w", newline="") as fh:
        fh.write(",".join(EVENT_HEADER) + "\n")
        for ev in session.trials:
            row = [str(ev.trial_index), str(ev.target_id), ev.condition,
                   *(_num(v) for v in ev.boundaries)]
            fh.write(",".join(row) + "\n")
    return path


def read_session(path) -> SessionDataset:
    path = Path(path)
    meta_file = path / "session.json"
    if not meta_file.exists():
        raise MissingData(f"no session.json in {path}")
    meta = json.loads(meta_file.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ShapeError(f"unsupported session format {meta.get('format_version')!r}")
    m = meta["montage"]
    try:
        montage = builtin_montage(m["name"])
        if list(montage.channels) != m["channels"]:
            montage = Montage(m["name"], tuple(m["channels"]))
    except KeyError:
        montage = Montage(m["name"], tuple(m["channels"]))
    e = meta["eeg"]
    raw = np.fromfile(path / e.get("file", "eeg.f32"), dtype="<f4")
    n_ch = len(montage)
    if raw.size % n_ch:
        raise ShapeError("eeg.f32 size is not a multiple of the channel count")
    data = raw.reshape(n_ch, -1).astype(np.float64)
    eeg = EegStream(float(e["sample_rate_hz"]), data, float(e.get("start_time_s", 0.0)))

    kin = np.loadtxt(path / meta.get("kin_file", "kin.csv"), delimiter=",", skiprows=1, ndmin=2)
    kin_stream = KinematicStream(kin[:, 0], kin[:, 1:4])

    trials = []
    with open(path / meta.get("events_file", "events.csv"), newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != EVENT_HEADER:
            raise ShapeError(f"unexpected events.csv header {reader.fieldnames}")
        for row in reader:
            trials.append(TrialEvent(int(row["trial"]), int(row["target"]), row["condition"],
                                     float(row["t_rest"]), float(row["t_indication"]),
                                     float(row["t_target"]), float(row["t_reset"]),
                                     float(row["t_end"])))
    return SessionDataset(int(meta["session_index"]), meta["modality"],
                          float(meta["assistance_fraction"]), montage, eeg, kin_stream,
                          tuple(trials), meta["participant_id"])
