"""Decoding-accuracy scoring and the FDG / SAT / WSR evaluation strategies.

FDG trains once on the first session and decodes later sessions with the
frozen model. SAT retrains on one session and tests on another following
a fixed map. WSR cross-validates inside each session with folds stratified
by target. When a model is tested on the session it was trained on, only
its held-out validation trials are scored.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import AXES, substream
from .ersp import PairSet
from .errors import InsufficientData, MissingData, UndefinedCorrelation
from .nn.model import CnnLstmModel, HyperParams
from .nn.train import TrainConfig, Trainer, predict_pairs
from .stats import pearson_r

REPORT_FORMAT_VERSION = 1
STRATEGIES = ("FDG", "SAT", "WSR")
SAT_MAP = ((1, 1), (1, 2), (2, 3), (3, 4), (4, 5))
FDG_MAP = ((1, 1), (1, 2), (1, 3), (1, 4), (1, 5))


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    session_map: tuple = ()
    folds: int = 5

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if not self.session_map and self.kind != "WSR":
            object.__setattr__(self, "session_map", SAT_MAP if self.kind == "SAT" else FDG_MAP)
        object.__setattr__(self, "session_map", tuple(tuple(p) for p in self.session_map))
        if self.kind == "FDG" and len({a for a, _ in self.session_map}) != 1:
            raise ValueError("FDG uses a single training session")
        if self.kind == "WSR" and self.folds < 2:
            raise ValueError("WSR needs at least 2 folds")


@dataclass(frozen=True)
class SessionPairs:
    """Training pairs of one recorded session plus its identity."""

    pairs: PairSet
    participant_id: str = "P01"
    session_index: int = 1
    modality: str = "screen"


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _mean(values):
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class EvalReport:
    participant_id: str
    session_index: int
    modality: str
    strategy: str
    axis_r: list                 # x, y, z
    overall_r: float
    per_target: dict             # target id -> [x, y, z]
    per_trial: list              # {"trial", "target", "r": [x, y, z] with None if undefined}
    excluded: int = 0            # (trial, axis) cells with undefined r
    window: dict = field(default_factory=lambda: {"start_s": 0.0, "length_s": 2.0, "step_s": 0.016})
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"participant": self.participant_id, "session": self.session_index,
                "modality": self.modality, "strategy": self.strategy,
                "axis_r": dict(zip(AXES, self.axis_r)), "overall_r": self.overall_r,
                "per_target": {str(k): dict(zip(AXES, v)) for k, v in sorted(self.per_target.items())},
                "per_trial": self.per_trial, "excluded": self.excluded,
                "window": self.window, **self.extra}


def _aggregate(per_trial: list) -> tuple:
    """Per-target means, then axis means over targets, then overall."""
    targets = sorted({t["target"] for t in per_trial})
    per_target = {}
    for tg in targets:
        rows = [t["r"] for t in per_trial if t["target"] == tg]
        per_target[tg] = [_mean(r[a] for r in rows) for a in range(3)]
    axis_r = [_mean(per_target[tg][a] for tg in targets) for a in range(3)]
    return axis_r, _mean(axis_r), per_target


def score_from_predictions(pred, pairs: PairSet, *, participant_id="P01", session_index=1,
                           modality="screen", strategy="WSR", trials=None) -> EvalReport:
    """Per-trial, per-axis Pearson r between ``pred`` and the pair labels.

    ``pred`` rows follow pair order. ``trials`` optionally restricts scoring
    to those trial positions. Undefined correlations are excluded and
    counted.
    """
    pred = np.asarray(pred, dtype=float)
    if pred.shape[0] != len(pairs):
        raise ValueError(f"{pred.shape[0]} predictions for {len(pairs)} pairs")
    starts = np.concatenate([[0], np.cumsum([len(lab) for lab in pairs.labels])])
    keep = range(pairs.n_trials) if trials is None else sorted(int(t) for t in trials)
    per_trial, excluded = [], 0
    for tr in keep:
        lab = pairs.labels[tr]
        p = pred[starts[tr]:starts[tr + 1]]
        rs = []
        for a in range(min(3, p.shape[1])):
            try:
                rs.append(pearson_r(p[:, a], lab[:, a]))
            except UndefinedCorrelation:
                rs.append(None)
                excluded += 1
        ev = pairs.events[tr]
        per_trial.append({"trial": ev.trial_index, "target": ev.target_id, "r": rs})
    axis_r, overall, per_target = _aggregate(per_trial)
    return EvalReport(participant_id, session_index, modality, strategy, axis_r, overall,
                      per_target, per_trial, excluded)


def score_trials(model: CnnLstmModel, data: SessionPairs, strategy: str = "WSR",
                 trials=None) -> EvalReport:
    pred = predict_pairs(model, data.pairs)
    return score_from_predictions(pred, data.pairs, participant_id=data.participant_id,
                                  session_index=data.session_index, modality=data.modality,
                                  strategy=strategy, trials=trials)


def mean_reports(reports: list, **ident) -> EvalReport:
    """Unweighted mean of several reports (fold means, FDG session means)."""
    axis_r = [_mean(r.axis_r[a] for r in reports) for a in range(3)]
    targets = sorted({t for r in reports for t in r.per_target})
    per_target = {t: [_mean(r.per_target[t][a] for r in reports if t in r.per_target)
                      for a in range(3)] for t in targets}
    per_trial = [t for r in reports for t in r.per_trial]
    first = reports[0]
    base = {"participant_id": first.participant_id, "session_index": first.session_index,
            "modality": first.modality, "strategy": first.strategy}
    base.update(ident)
    return EvalReport(axis_r=axis_r, overall_r=_mean(axis_r), per_target=per_target,
                      per_trial=per_trial, excluded=sum(r.excluded for r in reports), **base)


# ---------------------------------------------------------------------------
# Training units
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecoderFactory:
    """How to build and train one decoder for a strategy unit."""

    hyper: HyperParams = HyperParams()
    train_cfg: TrainConfig = TrainConfig()
    dtype: type = np.float32

    def fit(self, pairs: PairSet, seed: int, key) -> tuple:
        """Train on ``pairs``; returns (model, report, held-out trial positions)."""
        rng = substream(seed, "init", *key)
        init_seed, split_seed = (int(v) for v in rng.integers(0, 2**31, 2))
        cfg = replace(self.train_cfg, seed=split_seed)
        model = CnnLstmModel(self.hyper, pairs.input_shape, rng_seed=init_seed, dtype=self.dtype)
        trainer = Trainer(model, pairs, cfg)
        report = trainer.run()
        held = [k for k, ev in enumerate(pairs.events)
                if ev.trial_index in {e.trial_index for e in trainer.val_pairs.events}]
        return model, report, held


def stratified_folds(targets, k: int, rng) -> np.ndarray:
    """Fold id per trial; every target is spread over folds within +-1.

    Trials of each target are shuffled and dealt round-robin; the dealing
    position carries over between targets so fold sizes also stay within 1.
    """
    targets = np.asarray(targets)
    fold = np.empty(len(targets), dtype=int)
    pos = 0
    for tg in np.unique(targets):
        idx = np.flatnonzero(targets == tg)
        idx = idx[rng.permutation(len(idx))]
        fold[idx] = (pos + np.arange(len(idx))) % k
        pos += len(idx)
    return fold


def _map_units(fn, units: list, workers: int) -> list:
    if workers <= 1 or len(units) <= 1:
        return [fn(u) for u in units]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, units))


def run_strategy(spec: StrategySpec, datasets: dict, factory: DecoderFactory = DecoderFactory(),
                 seed: int = 0, workers: int = 1, cache: dict | None = None) -> dict:
    """Run one strategy; returns ``{"sessions": [EvalReport...], "aggregate": EvalReport,
    "models": {train_session: weight hash}}``.

    ``datasets`` maps session index to :class:`SessionPairs`. Training units
    run concurrently under ``workers`` threads; every unit derives its seeds
    from its own key, so results do not depend on scheduling. Passing the
    same ``cache`` dict to several calls reuses models trained on a whole
    session (FDG and SAT share the first-session decoder).
    """
    if spec.kind == "WSR":
        return _run_wsr(spec, datasets, factory, seed, workers)
    needed = {s for pair in spec.session_map for s in pair}
    missing = sorted(needed - set(datasets))
    if missing:
        raise MissingData(f"sessions {missing} required by {spec.kind} are absent")
    train_sessions = sorted({a for a, _ in spec.session_map})

    cache = {} if cache is None else cache

    def key(s):
        return (datasets[s].participant_id, "session", s)

    def fit(s):
        return factory.fit(datasets[s].pairs, seed, key(s))

    todo = [s for s in train_sessions if (factory, seed, key(s)) not in cache]
    for s, res in zip(todo, _map_units(fit, todo, workers)):
        cache[(factory, seed, key(s))] = res
    fitted = {s: cache[(factory, seed, key(s))] for s in train_sessions}
    reports = []
    for a, b in spec.session_map:
        model, _, held = fitted[a]
        trials = held if a == b else None
        rep = score_trials(model, datasets[b], spec.kind, trials)
        rep.extra = {"train_session": a, "weight_hash": model.weight_hash()}
        reports.append(rep)
    agg = mean_reports(reports, session_index=0)
    return {"sessions": reports, "aggregate": agg,
            "models": {a: fitted[a][0].weight_hash() for a in train_sessions},
            "train_reports": {a: fitted[a][1].as_dict() for a in train_sessions}}


def _run_wsr(spec, datasets, factory, seed, workers):
    sessions = sorted(datasets)
    if not sessions:
        raise MissingData("WSR needs at least one session")
    units, folds_of = [], {}
    for s in sessions:
        d = datasets[s]
        if d.pairs.n_trials < spec.folds:
            raise InsufficientData(f"session {s}: {d.pairs.n_trials} trials for {spec.folds} folds")
        folds_of[s] = stratified_folds(d.pairs.targets, spec.folds,
                                       substream(seed, "folds", d.participant_id, s))
        units += [(s, f) for f in range(spec.folds)]

    def run(unit):
        s, f = unit
        d = datasets[s]
        fold = folds_of[s]
        train_idx, test_idx = np.flatnonzero(fold != f), np.flatnonzero(fold == f)
        model, report, _ = factory.fit(d.pairs.subset(train_idx), seed, (d.participant_id, "wsr", s, f))
        test = SessionPairs(d.pairs.subset(test_idx), d.participant_id, s, d.modality)
        rep = score_trials(model, test, "WSR")
        rep.extra = {"fold": f, "weight_hash": model.weight_hash()}
        return rep, report

    results = dict(zip(units, _map_units(run, units, workers)))
    reports = []
    for s in sessions:
        fold_reps = [results[(s, f)][0] for f in range(spec.folds)]
        rep = mean_reports(fold_reps)
        rep.extra = {"folds": [{"fold": r.extra["fold"], "axis_r": r.axis_r, "overall_r": r.overall_r}
                               for r in fold_reps]}
        reports.append(rep)
    agg = mean_reports(reports, session_index=0)
    return {"sessions": reports, "aggregate": agg, "models": {},
            "train_reports": {f"{s}/{f}": results[(s, f)][1].as_dict() for s, f in units}}


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

CSV_HEADER = ["participant", "session", "modality", "strategy", "axis", "r"]


def report_rows(reports: list) -> list:
    rows = []
    for rep in reports:
        for axis, r in zip((*AXES, "overall"), (*rep.axis_r, rep.overall_r)):
            rows.append([rep.participant_id, rep.session_index, rep.modality, rep.strategy, axis,
                         repr(float(r))])
    return rows


def reports_csv(reports: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(report_rows(reports))
    return buf.getvalue()


def write_reports(result: dict, json_path, csv_path=None, meta: dict | None = None) -> None:
    """Strategy result as JSON (full per-trial arrays) plus the flat CSV summary."""
    doc = {"format_version": REPORT_FORMAT_VERSION, **(meta or {}),
           "sessions": [r.as_dict() for r in result["sessions"]],
           "aggregate": result["aggregate"].as_dict(),
           "models": {str(k): v for k, v in result.get("models", {}).items()},
           "train_reports": {str(k): v for k, v in result.get("train_reports", {}).items()}}
    Path(json_path).write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n")
    if csv_path is not None:
        Path(csv_path).write_text(reports_csv(result["sessions"] + [result["aggregate"]]))
