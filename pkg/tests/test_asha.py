import math
import threading

import numpy as np
import pytest

from trajdecode.asha import (AshaScheduler, SearchSpace, noiseless_quality, read_log, run_asha,
                             sample_configs, total_epochs, verify_events)

SPACE = SearchSpace()


def noiseless(hp, epochs):
    return noiseless_quality(hp)


def test_default_sample_is_in_bounds():
    configs = sample_configs(SPACE, 200, seed=4)
    assert len(configs) == 200
    assert all(SPACE.contains(c) for c in configs)
    assert {c.activation for c in configs} == {"relu", "tanh"}
    assert {c.batch_size for c in configs} == {6, 12, 24, 48}


def test_sampling_is_deterministic():
    assert sample_configs(SPACE, 20, 9) == sample_configs(SPACE, 20, 9)
    assert sample_configs(SPACE, 20, 9) != sample_configs(SPACE, 20, 10)
    with pytest.raises(ValueError):
        sample_configs(SPACE, 0, 1)


def test_lr_is_log_uniform_per_decade():
    lr = np.array([c.learning_rate for c in sample_configs(SPACE, 10_000, 1)])
    # analytic CDF of log-uniform on [1e-6, 1e-2]: a quarter of the mass per decade
    for lo in range(-6, -2):
        frac = np.mean((lr >= 10.0 ** lo) & (lr < 10.0 ** (lo + 1)))
        assert abs(frac - 0.25) < 0.02
    for q in (0.1, 0.5, 0.9):
        assert abs(np.log10(np.quantile(lr, q)) - (-6 + 4 * q)) < 0.08


def test_bias_reg_and_dropout_ranges():
    cs = sample_configs(SPACE, 2000, 2)
    br = np.log10([c.bias_reg for c in cs])
    assert abs(np.mean(br < -3.5) - 0.5) < 0.05
    dr = np.array([c.dropout for c in cs])
    assert abs(dr.mean() - 0.25) < 0.01


@pytest.mark.parametrize("seed", range(20))
def test_noiseless_benchmark_finds_brute_force_best(seed):
    configs = sample_configs(SPACE, 16, seed)
    res = run_asha(noiseless, configs, seed=seed)
    brute = min(range(16), key=lambda i: (noiseless_quality(configs[i]), i))
    assert res.best_id == brute and res.best_rung == 2
    verify_events(res.ledger.events)


def test_epoch_budget_on_benchmark():
    configs = sample_configs(SPACE, 16, 0)
    res = run_asha(noiseless, configs)
    exhaustive = 16 * 12
    assert res.total_epochs == total_epochs(res.ledger.events)
    # 16 at 3 epochs, 8 resumed for 3 more, 4 resumed for 6 more
    assert res.total_epochs == 16 * 3 + 8 * 3 + 4 * 6 == 96
    assert 16 * 3 <= res.total_epochs < exhaustive


def test_workers_do_not_change_the_outcome():
    configs = sample_configs(SPACE, 24, 3)
    one = run_asha(noiseless, configs, workers=1)
    eight = run_asha(noiseless, configs, workers=8)
    assert one.best_id == eight.best_id and one.best_loss == eight.best_loss
    verify_events(eight.ledger.events)


def test_asynchronous_promotion_happens_before_all_starts():
    configs = sample_configs(SPACE, 16, 5)
    res = run_asha(noiseless, configs, workers=2)
    kinds = [e["event"] for e in res.ledger.events]
    first_promote = kinds.index("promote")
    last_start = len(kinds) - 1 - kinds[::-1].index("start")
    assert first_promote < last_start


def test_failed_trials_are_excluded():
    configs = sample_configs(SPACE, 12, 6)
    bad = {1, 4}

    def flaky(hp, epochs):
        if configs.index(hp) in bad:
            raise RuntimeError("diverged")
        return noiseless_quality(hp)

    res = run_asha(flaky, configs)
    failed = {e["config_id"] for e in res.ledger.events if e["event"] == "failed"}
    assert failed == bad
    assert not bad & set(res.ledger.results[0])
    ok = [i for i in range(12) if i not in bad]
    assert res.best_id == min(ok, key=lambda i: noiseless_quality(configs[i]))
    verify_events(res.ledger.events)


def test_nan_loss_counts_as_failure():
    sched = AshaScheduler(2)
    sched.next_job()
    sched.report(0, 0, math.nan)
    assert 0 in sched.ledger.failed and not sched.ledger.results[0]


def test_monotone_promotion_with_epoch_dependent_objective():
    configs = sample_configs(SPACE, 32, 7)
    res = run_asha(lambda hp, e: noiseless_quality(hp) / e + 0.01 * e, configs, workers=3,
                   duration=lambda hp, e: e * (1 + hp.conv_layers))
    verify_events(res.ledger.events)
    assert 32 * 3 <= res.total_epochs <= 32 * 12


def test_log_is_resumable(tmp_path):
    log = tmp_path / "asha.jsonl"
    configs = sample_configs(SPACE, 10, 8)
    calls = []

    def counted(hp, e):
        calls.append(e)
        return noiseless_quality(hp)

    first = run_asha(counted, configs, log_path=log)
    n_calls = len(calls)
    assert len(read_log(log)) == len(first.ledger.events)
    second = run_asha(counted, configs, log_path=log)
    assert len(calls) == n_calls
    assert second.best_id == first.best_id and second.total_epochs == 0


def test_threaded_mode_matches_simulated_best():
    configs = sample_configs(SPACE, 16, 11)
    seen = set()
    lock = threading.Lock()

    def obj(hp, e):
        with lock:
            seen.add(threading.get_ident())
        return noiseless_quality(hp)

    res = run_asha(obj, configs, workers=3, simulated=False)
    assert res.best_id == run_asha(noiseless, configs).best_id
    verify_events(res.ledger.events)


def test_verify_events_rejects_bad_logs():
    with pytest.raises(AssertionError):
        verify_events([{"event": "promote", "config_id": 0, "rung": 1}])
    evs = [{"event": "result", "config_id": i, "rung": 0, "val_loss": float(i)} for i in range(2)]
    evs.append({"event": "promote", "config_id": 1, "rung": 1})
    with pytest.raises(AssertionError):
        verify_events(evs)
    with pytest.raises(AssertionError):
        verify_events(evs[:2] + [{"event": "result", "config_id": 0, "rung": 1, "val_loss": 0.0}])


def test_rung_validation():
    with pytest.raises(ValueError):
        AshaScheduler(4, rungs=(6, 3))
    with pytest.raises(ValueError):
        AshaScheduler(4, eta=1)
