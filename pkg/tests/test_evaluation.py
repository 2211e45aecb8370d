import json
from collections import Counter

import numpy as np
import pytest

from conftest import TINY, toy_pairs
from trajdecode.evaluation import (FDG_MAP, SAT_MAP, DecoderFactory, SessionPairs, StrategySpec,
                                   mean_reports, reports_csv, run_strategy,
                                   score_from_predictions, stratified_folds, write_reports)
from trajdecode.errors import InsufficientData, MissingData
from trajdecode.nn.train import TrainConfig

FACTORY = DecoderFactory(TINY, TrainConfig(max_epochs=2), dtype=np.float64)


def test_strategy_maps():
    assert StrategySpec("SAT").session_map == SAT_MAP == ((1, 1), (1, 2), (2, 3), (3, 4), (4, 5))
    assert StrategySpec("FDG").session_map == FDG_MAP
    assert {a for a, _ in FDG_MAP} == {1}
    with pytest.raises(ValueError):
        StrategySpec("XYZ")
    with pytest.raises(ValueError):
        StrategySpec("FDG", ((1, 1), (2, 2)))
    with pytest.raises(ValueError):
        StrategySpec("WSR", folds=1)


def test_perfect_decoder_scores_one():
    pairs = toy_pairs(n_trials=8)
    rep = score_from_predictions(pairs.label_array(), pairs)
    assert all(r == pytest.approx(1.0, abs=1e-12) for t in rep.per_trial for r in t["r"])
    assert rep.overall_r == pytest.approx(1.0, abs=1e-12) and rep.excluded == 0


def test_offset_decoder_scores_one():
    pairs = toy_pairs(n_trials=8)
    rep = score_from_predictions(pairs.label_array() + np.array([3.0, -7.0, 0.5]), pairs)
    assert all(r == pytest.approx(1.0, abs=1e-12) for t in rep.per_trial for r in t["r"])


def test_white_noise_is_near_zero():
    pairs = toy_pairs(n_trials=128, steps=125, shape=(1, 2, 4), onset_pad=0)
    noise = np.random.default_rng(5).standard_normal((len(pairs), 3))
    rep = score_from_predictions(noise, pairs)
    assert abs(rep.overall_r) < 0.1
    assert all(abs(r) < 0.1 for r in rep.axis_r)


def test_aggregation_is_hierarchical_and_exact():
    pairs = toy_pairs(n_trials=12)
    pred = pairs.label_array() + np.random.default_rng(1).standard_normal((len(pairs), 3))
    rep = score_from_predictions(pred, pairs)
    for tg, vals in rep.per_target.items():
        rows = [t["r"] for t in rep.per_trial if t["target"] == tg]
        assert vals == [float(np.mean([r[a] for r in rows])) for a in range(3)]
    assert rep.axis_r == [float(np.mean([v[a] for v in rep.per_target.values()])) for a in range(3)]
    assert rep.overall_r == float(np.mean(rep.axis_r))
    assert all(-1 <= r <= 1 for r in rep.axis_r)


def test_constant_prediction_is_excluded_and_counted():
    pairs = toy_pairs(n_trials=8)
    pred = pairs.label_array().copy()
    pred[:10, 0] = 2.0                 # first trial, x axis
    rep = score_from_predictions(pred, pairs)
    assert rep.excluded == 1 and rep.per_trial[0]["r"][0] is None
    assert rep.per_target[0][0] == pytest.approx(1.0)


def test_trial_restriction_and_length_check():
    pairs = toy_pairs(n_trials=6)
    rep = score_from_predictions(pairs.label_array(), pairs, trials=[4, 1])
    assert [t["trial"] for t in rep.per_trial] == [1, 4]
    with pytest.raises(ValueError):
        score_from_predictions(np.zeros((3, 3)), pairs)


@pytest.mark.parametrize("n,k", [(40, 5), (37, 5), (256, 5), (10, 3)])
def test_stratified_folds_balance(n, k):
    targets = np.arange(n) % 4
    fold = stratified_folds(targets, k, np.random.default_rng(n))
    sizes = Counter(fold.tolist())
    assert max(sizes.values()) - min(sizes.values()) <= 1 and len(sizes) == k
    for tg in range(4):
        counts = [np.sum((fold == f) & (targets == tg)) for f in range(k)]
        assert max(counts) - min(counts) <= 1


def test_mean_reports_is_unweighted():
    a = score_from_predictions(toy_pairs(4).label_array(), toy_pairs(4))
    pairs = toy_pairs(8, seed=1)
    b = score_from_predictions(np.random.default_rng(0).standard_normal((len(pairs), 3)), pairs)
    m = mean_reports([a, b])
    assert m.axis_r == [float(np.mean([a.axis_r[i], b.axis_r[i]])) for i in range(3)]


def _datasets(n_sessions=5, n_trials=8):
    return {s: SessionPairs(toy_pairs(n_trials, seed=s), "P01", s, "vr") for s in range(1, n_sessions + 1)}


def test_fdg_uses_one_frozen_decoder():
    out = run_strategy(StrategySpec("FDG"), _datasets(), FACTORY, seed=2)
    hashes = {r.extra["weight_hash"] for r in out["sessions"]}
    assert len(hashes) == 1 and [r.session_index for r in out["sessions"]] == [1, 2, 3, 4, 5]
    assert out["models"] == {1: hashes.pop()}
    # self-test on the training session scores only held-out trials
    assert len(out["sessions"][0].per_trial) == 2
    assert len(out["sessions"][1].per_trial) == 8
    assert out["aggregate"].axis_r == [float(np.mean([r.axis_r[a] for r in out["sessions"]]))
                                       for a in range(3)]


def test_sat_retrains_and_shares_cache_with_fdg():
    data = _datasets()
    cache = {}
    fdg = run_strategy(StrategySpec("FDG"), data, FACTORY, seed=2, cache=cache)
    sat = run_strategy(StrategySpec("SAT"), data, FACTORY, seed=2, cache=cache)
    assert len(cache) == 4
    assert sat["models"][1] == fdg["models"][1]
    assert len(set(sat["models"].values())) == 4
    assert [r.extra["train_session"] for r in sat["sessions"]] == [1, 1, 2, 3, 4]


def test_missing_session():
    data = _datasets(3)
    with pytest.raises(MissingData):
        run_strategy(StrategySpec("SAT"), data, FACTORY)
    with pytest.raises(MissingData):
        run_strategy(StrategySpec("WSR"), {}, FACTORY)


def test_wsr_folds_and_workers():
    data = _datasets(2, n_trials=10)
    one = run_strategy(StrategySpec("WSR", folds=5), data, FACTORY, seed=1)
    two = run_strategy(StrategySpec("WSR", folds=5), data, FACTORY, seed=1, workers=2)
    assert [len(r.extra["folds"]) for r in one["sessions"]] == [5, 5]
    assert sorted(t["trial"] for t in one["sessions"][0].per_trial) == list(range(10))
    assert json.dumps([r.as_dict() for r in one["sessions"]]) == \
        json.dumps([r.as_dict() for r in two["sessions"]])
    with pytest.raises(InsufficientData):
        run_strategy(StrategySpec("WSR", folds=5), _datasets(1, n_trials=4), FACTORY)


def test_learnable_toy_is_decoded():
    data = {1: SessionPairs(toy_pairs(40, steps=30, shape=(2, 4, 8), seed=3, noise=0.01), "P01", 1)}
    hp = TINY.__class__(**{**TINY.as_dict(), "filters_per_layer": (8, 8), "lstm_units": (16,),
                           "learning_rate": 5e-3, "bias_reg": 0.0})
    factory = DecoderFactory(hp, TrainConfig(max_epochs=24, patience=24), dtype=np.float64)
    out = run_strategy(StrategySpec("WSR", folds=4), data, factory, seed=0)
    assert out["aggregate"].overall_r > 0.3


def test_report_files(tmp_path):
    out = run_strategy(StrategySpec("FDG", ((1, 1), (1, 2))), _datasets(2), FACTORY)
    write_reports(out, tmp_path / "r.json", tmp_path / "r.csv", meta={"strategy": "FDG"})
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["format_version"] == 1 and len(doc["sessions"]) == 2
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "participant,session,modality,strategy,axis,r"
    assert len(lines) == 1 + 4 * 3
    assert reports_csv(out["sessions"]).splitlines()[1].startswith("P01,1,vr,FDG,x,")
