"""Asynchronous successive halving over the CNN-LSTM search space.

Resources are epochs. A trial promoted from rung ``k`` to ``k+1`` resumes
training, so it costs ``r[k+1] - r[k]`` further epochs. The scheduler
follows the asynchronous rule: whenever a worker asks for work it promotes
the best not-yet-promoted configuration that sits in the top
``floor(n_k / eta)`` of rung ``k`` (highest rung first), as long as the
rung has promoted fewer than ``floor(n_k / eta)`` configurations in total,
and otherwise starts a fresh configuration. No rung ever waits for another.
"""
from __future__ import annotations

import heapq
import json
import math
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import substream
from .nn.model import HyperParams


@dataclass(frozen=True)
class SearchSpace:
    lr: tuple = (1e-6, 1e-2)
    batch: tuple = (6, 12, 24, 48)
    conv_layers: tuple = (2, 3, 4)
    filters: tuple = (16, 32)
    kernel: tuple = (3, 5, 7)
    dropout: tuple = (0.1, 0.4)
    activation: tuple = ("relu", "tanh")
    bias_reg: tuple = (1e-4, 1e-3)
    lstm_layers: tuple = (1, 2)
    lstm_units_l1: tuple = (20, 100)
    seq_len_steps: int = 6
    outputs: int = 3

    def contains(self, hp: HyperParams) -> bool:
        return (self.lr[0] <= hp.learning_rate <= self.lr[1]
                and hp.batch_size in self.batch
                and hp.conv_layers in self.conv_layers
                and all(self.filters[0] <= f <= self.filters[1] for f in hp.filters_per_layer)
                and hp.kernel_size in self.kernel
                and self.dropout[0] <= hp.dropout <= self.dropout[1]
                and hp.activation in self.activation
                and self.bias_reg[0] <= hp.bias_reg <= self.bias_reg[1]
                and hp.lstm_layers in self.lstm_layers
                and self.lstm_units_l1[0] <= hp.lstm_units[0] <= self.lstm_units_l1[1])


def _log_uniform(rng, lo, hi):
    return float(10.0 ** rng.uniform(math.log10(lo), math.log10(hi)))


def sample_configs(space: SearchSpace = SearchSpace(), n: int = 200, seed: int = 0) -> list:
    """``n`` independent draws from ``space``; deterministic in ``seed``.

    Deeper LSTM layers reuse the first layer's unit count.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = substream(seed, "configs")
    out = []
    for _ in range(n):
        conv = int(rng.choice(space.conv_layers))
        lstm = int(rng.choice(space.lstm_layers))
        units = int(rng.integers(space.lstm_units_l1[0], space.lstm_units_l1[1] + 1))
        out.append(HyperParams(
            learning_rate=_log_uniform(rng, *space.lr),
            batch_size=int(rng.choice(space.batch)),
            conv_layers=conv,
            filters_per_layer=tuple(int(f) for f in rng.integers(space.filters[0], space.filters[1] + 1, conv)),
            kernel_size=int(rng.choice(space.kernel)),
            dropout=float(rng.uniform(*space.dropout)),
            activation=str(rng.choice(space.activation)),
            bias_reg=_log_uniform(rng, *space.bias_reg),
            lstm_layers=lstm,
            lstm_units=(units,) * lstm,
            seq_len_steps=space.seq_len_steps,
            outputs=space.outputs,
        ))
    return out


# ---------------------------------------------------------------------------
# Scheduler
# ---------------------------------------------------------------------------

@dataclass
class RungLedger:
    rungs: tuple = (3, 6, 12)
    eta: int = 2
    results: list = field(default_factory=list)     # per rung: {config_id: val_loss}
    promoted: list = field(default_factory=list)    # per rung: ids promoted out of it
    failed: set = field(default_factory=set)
    events: list = field(default_factory=list)

    def __post_init__(self):
        if list(self.rungs) != sorted(set(self.rungs)) or self.rungs[0] < 1:
            raise ValueError("rungs must be strictly increasing positive epochs")
        if self.eta < 2:
            raise ValueError("eta must be >= 2")
        self.results = self.results or [dict() for _ in self.rungs]
        self.promoted = self.promoted or [set() for _ in self.rungs]

    def epochs_for(self, rung: int) -> int:
        """Additional epochs needed to reach ``rung`` from the rung below."""
        return self.rungs[rung] - (self.rungs[rung - 1] if rung else 0)

    def top(self, rung: int) -> list:
        """Config ids in the top ``floor(n / eta)`` of a rung, best first."""
        res = self.results[rung]
        ranked = sorted(res, key=lambda c: (res[c], c))
        return ranked[:len(res) // self.eta]

    @property
    def total_epochs(self) -> int:
        return sum(self.epochs_for(e["rung"]) for e in self.events
                   if e["event"] == "result" and not e.get("cached"))


class AshaScheduler:
    """Decision logic only; callers own the clock and the workers."""

    def __init__(self, n_configs: int, rungs=(3, 6, 12), eta: int = 2):
        self.n_configs = n_configs
        self.ledger = RungLedger(tuple(rungs), eta)
        self._next_new = 0
        self.running: set = set()

    def next_job(self):
        """``(config_id, rung)`` to run next, or None if nothing is runnable now."""
        led = self.ledger
        for k in reversed(range(len(led.rungs) - 1)):
            # promotions out of a rung never exceed floor(n_k / eta)
            if len(led.promoted[k]) >= len(led.results[k]) // led.eta:
                continue
            for cid in led.top(k):
                if cid not in led.promoted[k]:
                    led.promoted[k].add(cid)
                    self.running.add((cid, k + 1))
                    return cid, k + 1
        if self._next_new < self.n_configs:
            cid = self._next_new
            self._next_new += 1
            self.running.add((cid, 0))
            return cid, 0
        return None

    def report(self, cid: int, rung: int, val_loss) -> None:
        self.running.discard((cid, rung))
        if val_loss is None or not math.isfinite(val_loss):
            self.ledger.failed.add(cid)
        else:
            self.ledger.results[rung][cid] = float(val_loss)

    def best(self):
        """Lowest loss at the highest rung that has results: ``(id, loss, rung)``."""
        for k in reversed(range(len(self.ledger.rungs))):
            res = self.ledger.results[k]
            if res:
                cid = min(res, key=lambda c: (res[c], c))
                return cid, res[cid], k
        return None, math.inf, -1


@dataclass
class AshaResult:
    best_config: HyperParams | None
    best_id: int | None
    best_loss: float
    best_rung: int
    ledger: RungLedger
    configs: list

    @property
    def total_epochs(self) -> int:
        return self.ledger.total_epochs


def _event(kind, cid, rung, epochs, loss, wall, **extra):
    ev = {"event": kind, "config_id": cid, "rung": rung, "epochs": epochs,
          "val_loss": loss, "wall_time": wall}
    ev.update(extra)
    return ev


def read_log(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def run_asha(objective: Callable, configs: list | None = None, *, space: SearchSpace = SearchSpace(),
             n_configs: int = 200, workers: int = 1, seed: int = 0, rungs=(3, 6, 12), eta: int = 2,
             simulated: bool = True, duration: Callable | None = None,
             log_path=None) -> AshaResult:
    """Search ``configs`` (sampled from ``space`` if omitted) with ASHA.

    ``objective(config, epochs)`` returns the validation loss after
    ``epochs`` total epochs; raising marks the trial failed. In simulated
    mode a single thread plays ``workers`` workers against a virtual clock
    where a job takes ``duration(config, extra_epochs)`` (default: the
    epoch count) time units, so the run is reproducible for any worker
    count. Otherwise ``workers`` threads share the scheduler under a lock.
    With ``log_path`` every event is appended as one JSON line; results
    already in the log are reused instead of re-evaluated.
    """
    if configs is None:
        configs = sample_configs(space, n_configs, seed)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    sched = AshaScheduler(len(configs), rungs, eta)
    cache = {(e["config_id"], e["rung"]): e["val_loss"]
             for e in read_log(log_path) if e["event"] == "result"} if log_path else {}
    log_fh = open(log_path, "a") if log_path else None
    duration = duration or (lambda cfg, epochs: float(epochs))

    def emit(ev):
        sched.ledger.events.append(ev)
        if log_fh:
            log_fh.write(json.dumps(ev, sort_keys=True) + "\n")
            log_fh.flush()

    def evaluate(cid, rung):
        if (cid, rung) in cache:
            return cache[(cid, rung)], True
        try:
            loss = float(objective(configs[cid], sched.ledger.rungs[rung]))
        except Exception as exc:    # objective failures are data, not crashes
            return ("failed", repr(exc)), False
        return loss, False

    def dispatch(job, now):
        cid, rung = job
        kind = "start" if rung == 0 else "promote"
        emit(_event(kind, cid, rung, sched.ledger.rungs[rung], None, now))

    def complete(cid, rung, outcome, cached, now):
        if isinstance(outcome, tuple):
            sched.report(cid, rung, None)
            emit(_event("failed", cid, rung, sched.ledger.rungs[rung], None, now, error=outcome[1]))
        else:
            sched.report(cid, rung, outcome)
            extra = {"cached": True} if cached else {}
            emit(_event("result", cid, rung, sched.ledger.rungs[rung], outcome, now, **extra))

    try:
        if simulated:
            heap, seq, now, idle = [], 0, 0.0, workers
            while True:
                while idle:
                    job = sched.next_job()
                    if job is None:
                        break
                    dispatch(job, now)
                    outcome, cached = evaluate(*job)
                    cost = 0.0 if cached else duration(configs[job[0]], sched.ledger.epochs_for(job[1]))
                    heapq.heappush(heap, (now + cost, seq, job, outcome, cached))
                    seq += 1
                    idle -= 1
                if not heap:
                    break
                now, _, (cid, rung), outcome, cached = heapq.heappop(heap)
                complete(cid, rung, outcome, cached, now)
                idle += 1
        else:
            lock = threading.Condition()
            t0 = time.monotonic()

            def worker():
                while True:
                    with lock:
                        while True:
                            job = sched.next_job()
                            if job is not None:
                                dispatch(job, time.monotonic() - t0)
                                break
                            if not sched.running:
                                lock.notify_all()
                                return
                            lock.wait()
                    outcome, cached = evaluate(*job)
                    with lock:
                        complete(*job, outcome, cached, time.monotonic() - t0)
                        lock.notify_all()

            threads = [threading.Thread(target=worker, daemon=True) for _ in range(workers)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
    finally:
        if log_fh:
            log_fh.close()
    cid, loss, rung = sched.best()
    return AshaResult(configs[cid] if cid is not None else None, cid, loss, rung,
                      sched.ledger, configs)


def verify_events(events: list, rungs=(3, 6, 12), eta: int = 2) -> None:
    """Replay an event log and check the promotion invariants.

    * a config runs at rung ``k+1`` only after a result at rung ``k``;
    * at every promotion out of rung ``k``, the promotions so far are at most
      ``ceil(completed_k / eta)``;
    * a promoted config is never worse than a config at the same rung that
      had completed before the promotion and stays unpromoted forever.

    Raises AssertionError on the first violation.
    """
    n = len(rungs)
    done = [dict() for _ in rungs]
    promoted = [set() for _ in rungs]
    snapshots = []
    for ev in events:
        kind, cid, rung = ev["event"], ev["config_id"], ev["rung"]
        if kind == "promote":
            k = rung - 1
            assert 0 <= k < n - 1, f"bad promotion rung {rung}"
            assert cid in done[k], f"config {cid} promoted to rung {rung} without a rung-{k} result"
            promoted[k].add(cid)
            assert len(promoted[k]) <= math.ceil(len(done[k]) / eta), \
                f"rung {k}: {len(promoted[k])} promotions from {len(done[k])} results"
            snapshots.append((k, cid, dict(done[k])))
        elif kind == "result":
            assert rung == 0 or cid in promoted[rung - 1], f"config {cid} ran rung {rung} unpromoted"
            done[rung][cid] = ev["val_loss"]
    for k, cid, snap in snapshots:
        for other, loss in snap.items():
            if other not in promoted[k]:
                assert snap[cid] <= loss, f"rung {k}: promoted {cid} over better retired {other}"


def total_epochs(events: list, rungs=(3, 6, 12)) -> int:
    return sum(rungs[e["rung"]] - (rungs[e["rung"] - 1] if e["rung"] else 0)
               for e in events if e["event"] == "result" and not e.get("cached"))


def noiseless_quality(hp: HyperParams) -> float:
    """Synthetic epoch-independent objective for scheduler tests and smoke runs.

    A smooth bowl around lr=1e-3, dropout 0.25, 32 filters and 50 units,
    with small penalties for the categorical choices.
    """
    q = (math.log10(hp.learning_rate) + 3.0) ** 2
    q += ((hp.dropout - 0.25) / 0.15) ** 2
    q += ((np.mean(hp.filters_per_layer) - 32) / 16) ** 2
    q += ((hp.lstm_units[0] - 50) / 80) ** 2
    q += 0.1 * abs(hp.conv_layers - 3) + 0.05 * (hp.kernel_size - 3) / 2
    q += 0.02 * (hp.activation != "tanh") + 0.01 * abs(math.log2(hp.batch_size / 12))
    return float(q)


class TrainingObjective:
    """Real objective: trains a CNN-LSTM per configuration with resume.

    Asking for more epochs of a configuration continues its existing
    trainer; the returned loss is the best validation loss so far. Trainers
    are dropped once they reach ``final_epochs``.
    """

    def __init__(self, pairs, train_cfg=None, seed: int = 0, final_epochs: int = 12):
        from .nn.train import TrainConfig
        self.pairs = pairs
        self.train_cfg = train_cfg or TrainConfig()
        self.seed = seed
        self.final_epochs = final_epochs
        self._trainers: dict = {}
        self._lock = threading.Lock()

    def __call__(self, config: HyperParams, epochs: int) -> float:
        from .nn.model import CnnLstmModel
        from .nn.train import Trainer
        with self._lock:
            trainer = self._trainers.get(config)
        if trainer is None or trainer.report.epochs_run > epochs:
            key = json.dumps(config.as_dict(), sort_keys=True)
            init = int(substream(self.seed, "init", key).integers(2**31))
            model = CnnLstmModel(config, self.pairs.input_shape, rng_seed=init)
            trainer = Trainer(model, self.pairs, self.train_cfg)
        rep = trainer.run(epochs - trainer.report.epochs_run)
        with self._lock:
            if epochs >= self.final_epochs:
                self._trainers.pop(config, None)
            else:
                self._trainers[config] = trainer
        return float(rep.val_loss[rep.best_epoch - 1])
