"""Mini-batch Adam training with early stopping, and batched prediction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import substream
from ..ersp import PairSet
from ..errors import InsufficientData, ShapeError
from .model import CnnLstmModel


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


@dataclass
class TrainReport:
    epochs_run: int = 0
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = 0     # 1-based; val_loss[best_epoch - 1] is the minimum

    def as_dict(self) -> dict:
        return {"epochs_run": self.epochs_run, "train_loss": list(self.train_loss),
                "val_loss": list(self.val_loss), "stopped_early": self.stopped_early,
                "best_epoch": self.best_epoch}


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 12
    patience: int = 3
    val_fraction: float = 0.2
    # Consecutive steps per strip segment; None means a whole batch is one run.
    chunk_steps: int | None = None
    seed: int = 0
    axis: int | None = None     # label column for single-output models


def _labels(pairs: PairSet, model: CnnLstmModel, axis):
    y = pairs.label_array()
    if model.hyper.outputs == 1:
        if axis is None:
            raise ShapeError("single-output models need TrainConfig.axis")
        return y[:, [axis]]
    return y


def split_trials(pairs: PairSet, val_fraction: float, seed: int) -> tuple:
    """Trial-level train/validation split (no step of a trial leaks across)."""
    n = pairs.n_trials
    n_val = int(round(val_fraction * n))
    n_val = min(max(n_val, 1), n - 1) if n > 1 else 0
    order = substream(seed, "split").permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _trial_strip(pairs: PairSet, tr: int, s0: int, s1: int, seq: int) -> np.ndarray:
    """Frame columns feeding steps ``s0 .. s1-1`` of trial ``tr``."""
    end = int(pairs.onset_index[tr])
    a = end + s0 - (seq - 1) - (pairs.width - 1)
    if a < 0:
        raise InsufficientData("not enough frames before the first step")
    return pairs.frames[tr][:, :, a:end + s1]


def predict_pairs(model: CnnLstmModel, pairs: PairSet, trials_per_batch: int = 4) -> np.ndarray:
    """Eval-mode outputs for every pair, in pair order."""
    seq = model.hyper.seq_len_steps
    out = np.empty((len(pairs), model.hyper.outputs))
    counts = np.array([len(lab) for lab in pairs.labels])
    starts = np.concatenate([[0], np.cumsum(counts)])
    by_len: dict = {}
    for tr, n in enumerate(counts):
        if n:
            by_len.setdefault(int(n), []).append(tr)
    for n, trials in by_len.items():
        for i in range(0, len(trials), trials_per_batch):
            group = trials[i:i + trials_per_batch]
            strip = np.stack([_trial_strip(pairs, tr, 0, n, seq) for tr in group])
            y = model.forward_strip(strip).reshape(len(group), n, -1)
            for tr, yy in zip(group, y):
                out[starts[tr]:starts[tr] + n] = yy
    return out


class Trainer:
    """Resumable training loop.

    ``run(k)`` trains up to ``k`` more epochs, so successive calls continue
    the same optimisation (used by the tuner's rungs). After every call the
    model holds the best-validation weights; the latest weights and
    optimizer state are kept aside for the next call.
    """

    def __init__(self, model: CnnLstmModel, pairs: PairSet, cfg: TrainConfig = TrainConfig(),
                 val_pairs: PairSet | None = None):
        self.model = model
        self.cfg = cfg
        if val_pairs is None:
            tr, va = split_trials(pairs, cfg.val_fraction, cfg.seed)
            self.train_pairs, self.val_pairs = pairs.subset(tr), pairs.subset(va)
        else:
            self.train_pairs, self.val_pairs = pairs, val_pairs
        bs = model.hyper.batch_size
        if len(self.train_pairs) < 2 * bs or len(self.val_pairs) == 0:
            raise InsufficientData(
                f"{len(self.train_pairs)} training / {len(self.val_pairs)} validation pairs; "
                f"need >= {2 * bs} and >= 1")
        self.y_train = _labels(self.train_pairs, model, cfg.axis).astype(model.dtype)
        self.y_val = _labels(self.val_pairs, model, cfg.axis)
        self.chunk = cfg.chunk_steps or bs
        if bs % self.chunk:
            raise ValueError("chunk_steps must divide batch_size")
        self.opt = Adam(model.params, model.hyper.learning_rate)
        self.report = TrainReport()
        self._current = model.copy_params()
        self._best = model.copy_params()
        self._best_loss = np.inf
        self._stale = 0

    @property
    def finished(self) -> bool:
        return self.report.stopped_early or self.report.epochs_run >= self.cfg.max_epochs

    def _chunks(self, rng) -> list:
        """Shuffled batches; each is a list of equal-length (trial, s0, s1) runs."""
        pairs = self.train_pairs
        per_batch = self.model.hyper.batch_size // self.chunk
        runs: dict = {}
        for tr, lab in enumerate(pairs.labels):
            for s0 in range(0, len(lab), self.chunk):
                s1 = min(s0 + self.chunk, len(lab))
                runs.setdefault(s1 - s0, []).append((tr, s0, s1))
        batches = []
        for length in sorted(runs):
            group = runs[length]
            group = [group[i] for i in rng.permutation(len(group))]
            batches += [group[i:i + per_batch] for i in range(0, len(group), per_batch)]
        return [batches[i] for i in rng.permutation(len(batches))]

    def _epoch(self, epoch: int) -> float:
        model, pairs = self.model, self.train_pairs
        seq = model.hyper.seq_len_steps
        starts = np.concatenate([[0], np.cumsum([len(lab) for lab in pairs.labels])])
        rng = substream(self.cfg.seed, "epoch", epoch)
        total, count = 0.0, 0
        for batch in self._chunks(rng):
            strip = np.stack([_trial_strip(pairs, tr, s0, s1, seq) for tr, s0, s1 in batch])
            idx = np.concatenate([np.arange(starts[tr] + s0, starts[tr] + s1) for tr, s0, s1 in batch])
            y = self.y_train[idx]
            pred = model.forward_strip(strip, train=True, rng=rng)
            total += model.loss(pred, y) * len(idx)
            count += len(idx)
            self.opt.step(model.params, model.backward(pred, y))
        return total / count

    def validation_loss(self) -> float:
        return self.model.loss(predict_pairs(self.model, self.val_pairs), self.y_val)

    def run(self, epochs: int | None = None) -> TrainReport:
        cfg, rep = self.cfg, self.report
        target = cfg.max_epochs if epochs is None else min(cfg.max_epochs, rep.epochs_run + epochs)
        self.model.params = self._current
        while rep.epochs_run < target and not rep.stopped_early:
            epoch = rep.epochs_run + 1
            rep.train_loss.append(self._epoch(epoch))
            val = self.validation_loss()
            if not np.isfinite(val):
                raise FloatingPointError(f"validation loss became {val} at epoch {epoch}")
            rep.val_loss.append(val)
            rep.epochs_run = epoch
            if val < self._best_loss:
                self._best_loss, rep.best_epoch, self._stale = val, epoch, 0
                self._best = self.model.copy_params()
            else:
                self._stale += 1
                if self._stale >= cfg.patience:
                    rep.stopped_early = True
        self._current = self.model.params
        self.model.params = {k: v.copy() for k, v in self._best.items()}
        return rep

def train(model: CnnLstmModel, pairs: PairSet, cfg: TrainConfig = TrainConfig(),
          val_pairs: PairSet | None = None) -> TrainReport:
    """Train ``model`` in place and return its report (best weights restored)."""
    return Trainer(model, pairs, cfg, val_pairs).run()
