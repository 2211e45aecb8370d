import numpy as np
import pytest

from trajdecode.core import TrialEvent
from trajdecode.ersp import PairSet
from trajdecode.nn import HyperParams
from trajdecode.synth import ForwardModelConfig, Protocol, synth_session

TINY = HyperParams(conv_layers=2, filters_per_layer=(4, 4), lstm_layers=1, lstm_units=(5,),
                   seq_len_steps=3, dropout=0.0, batch_size=4, bias_reg=1e-3)


def make_event(i, target=0, t0=0.0, condition="executed"):
    b = np.cumsum([t0, 2.5, 1.6, 2.5, 1.0])
    return TrialEvent(i, target, condition, *b)


def toy_pairs(n_trials=8, steps=10, shape=(3, 8, 8), seed=0, onset_pad=6, noise=0.05):
    """PairSet whose labels are a fixed linear readout of the newest frame."""
    rng = np.random.default_rng(seed)
    c, f, width = shape
    proj = rng.standard_normal((c * f, 3)) / np.sqrt(c * f)
    frames, onsets, events, labels = [], [], [], []
    for t in range(n_trials):
        onset = width - 1 + onset_pad
        fr = rng.standard_normal((c, f, onset + steps + 2)).astype(np.float32)
        lab = np.stack([fr[:, :, onset + s].reshape(-1) @ proj for s in range(steps)])
        lab += noise * rng.standard_normal(lab.shape)
        frames.append(fr)
        onsets.append(onset)
        events.append(make_event(t, t % 4, t0=10.0 * t))
        labels.append(lab)
    return PairSet(tuple(frames), np.array(onsets), tuple(events), tuple(labels), 0.016, width)


@pytest.fixture(scope="session")
def small_session():
    """32-trial synthetic session on the full montage (snr 2, no drift)."""
    return synth_session(ForwardModelConfig(snr=2.0, seed=3), 1, protocol=Protocol(n_trials=32))


@pytest.fixture(scope="session")
def tiny_session():
    return synth_session(ForwardModelConfig(snr=2.0, seed=5), 1, protocol=Protocol(n_trials=16))


SMOKE_CONFIG = {
    "hyper": {"conv_layers": 2, "filters_per_layer": [4, 4], "lstm_layers": 1, "lstm_units": [8],
              "dropout": 0.0, "batch_size": 12},
    "train": {"max_epochs": 2},
}


def run_smoke_chain(root, workers=1, strategy="WSR"):
    """synth -> ersp -> train -> eval at 16 trials per session; returns the eval directory."""
    import json
    from pathlib import Path

    from trajdecode.cli import main

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "smoke.json"
    cfg.write_text(json.dumps(SMOKE_CONFIG))
    data = root / "data"
    sessions = [str(data / "P01" / "S01"), str(data / "P01" / "S02")]
    steps = [
        ["synth", "--participants", "1", "--sessions", "2", "--trials", "16", "--seed", "7",
         "--out", str(data)],
        ["ersp", "--sessions", *sessions, "--out", str(root / "ersp"), "--workers", str(workers)],
        ["train", "--session", sessions[0], "--ersp-cache", str(root / "ersp" / "P01_S01.ersp"),
         "--config", str(cfg), "--out", str(root / "train")],
        ["eval", "--sessions", *sessions, "--strategy", strategy, "--config", str(cfg),
         "--workers", str(workers), "--out", str(root / "eval")],
    ]
    for argv in steps:
        code = main(argv)
        assert code == 0, f"{argv[0]} exited with {code}"
    return root / "eval"


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = [mod.RESULTS[k] for k in sorted(mod.RESULTS)] if mod else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
