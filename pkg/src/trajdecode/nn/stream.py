"""Step-by-step decoding for online use (batch of one, no look-ahead)."""
from __future__ import annotations

from collections import deque

import numpy as np

from ..errors import InsufficientHistory, ShapeError
from .model import CnnLstmModel


class StreamDecoder:
    """Consumes one ERSP frame (channels x freqs) per 16 ms step.

    The last ``image_width`` frames form the newest window; its conv
    features join a ring of the last ``seq_len`` window features, and the
    recurrent head runs over that ring from zero state. This is the same
    computation as the batched forward, so both paths agree. Call
    :meth:`reset` at every trial boundary.
    """

    def __init__(self, model: CnnLstmModel):
        self.model = model
        c, f, self.width = model.input_shape
        self.frame_shape = (c, f)
        self._frames: deque = deque(maxlen=self.width)
        self._feats: deque = deque(maxlen=model.hyper.seq_len_steps)

    @property
    def warmup_frames(self) -> int:
        return self.width + self.model.hyper.seq_len_steps - 1

    @property
    def ready(self) -> bool:
        return len(self._feats) == self._feats.maxlen

    def reset(self) -> None:
        self._frames.clear()
        self._feats.clear()

    def push(self, frame) -> None:
        frame = np.asarray(frame)
        if frame.shape != self.frame_shape:
            raise ShapeError(f"frame shape {frame.shape} != {self.frame_shape}")
        self._frames.append(frame)
        if len(self._frames) == self.width:
            window = np.stack(self._frames, axis=-1)[None]
            self._feats.append(self.model.window_features(window)[0])

    def decode(self) -> np.ndarray:
        if not self.ready:
            raise InsufficientHistory(
                f"decoder needs {self.warmup_frames} frames since the last reset")
        return self.model.head(np.stack(self._feats)[None])[0]

    def step(self, frame) -> np.ndarray:
        self.push(frame)
        return self.decode()


def infer_stream(model: CnnLstmModel, trials) -> list:
    """Decode each trial's frame stream ``(C, F, T)`` with a reset between trials.

    Returns one ``(T - warmup + 1, outputs)`` array per trial; row ``j`` is the
    output after frame ``j + warmup - 1``.
    """
    dec = StreamDecoder(model)
    out = []
    for frames in trials:
        frames = np.asarray(frames)
        dec.reset()
        if frames.ndim != 3 or frames.shape[-1] < dec.warmup_frames:
            raise InsufficientHistory(
                f"trial stream has {frames.shape[-1] if frames.ndim == 3 else 0} frames, "
                f"need {dec.warmup_frames}")
        rows = []
        for j in range(frames.shape[-1]):
            dec.push(frames[:, :, j])
            if dec.ready:
                rows.append(dec.decode())
        out.append(np.array(rows))
    return out
