"""Command-line entry point: ``trajdecode <command> [options]``.

Exit codes: 0 success, 2 configuration error or bad usage, 3 data error.
"""
from __future__ import annotations

import argparse
import json
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import asha, connectivity, evaluation
from .config import (CONFIG_FORMAT_VERSION, config_hash, derived_seed, hyper_from,
                     load_config, parse_set, write_resolved)
from .core import AXES, band_by_name, builtin_montage
from .ersp import (ErspConfig, build_training_pairs, read_ersp_cache, read_ersp_header,
                   write_ersp_cache)
from .errors import ConfigError, DecodeError
from .nn.model import CnnLstmModel
from .nn.train import TrainConfig, Trainer
from .sessionio import read_session, write_session
from .stats import paired_compare
from .synth import ForwardModelConfig, Protocol, default_modality, synth_session

ARTIFACT_VERSION = 1


def _ersp_cfg(d: dict) -> ErspConfig:
    try:
        return ErspConfig(freqs_hz=tuple(range(1, int(d["freq_max_hz"]) + 1)), hop_s=float(d["hop_s"]),
                          lookback_s=40 * float(d["hop_s"]), wavelet_cycles=float(d["wavelet_cycles"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid ERSP settings: {exc}") from None


def _train_cfg(d: dict, seed: int) -> TrainConfig:
    try:
        return TrainConfig(max_epochs=int(d["max_epochs"]), patience=int(d["patience"]),
                           val_fraction=float(d["val_fraction"]),
                           chunk_steps=None if d["chunk_steps"] is None else int(d["chunk_steps"]),
                           seed=seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training settings: {exc}") from None


def _stamp(cfg: dict) -> dict:
    return {"format_version": ARTIFACT_VERSION, "config_hash": config_hash(cfg)}


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _pairs_for(session_dir, ersp: ErspConfig, cache=None):
    session = read_session(session_dir)
    if cache:
        return session, read_ersp_cache(cache, session)
    return session, build_training_pairs(session, ersp)


def _session_pairs(path, ersp):
    session, pairs = _pairs_for(path, ersp)
    return evaluation.SessionPairs(pairs, session.participant_id, session.session_index,
                                   session.modality)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict, out: Path) -> None:
    try:
        proto = Protocol(n_trials=int(cfg["trials"]), montage=cfg["montage"])
        builtin_montage(proto.montage)
        fms = [ForwardModelConfig(snr=float(cfg["snr"]), session_drift=float(cfg["drift"]),
                                  noise_exponent=float(cfg["noise_exponent"]),
                                  imagery_gain=float(cfg["imagery_gain"]),
                                  seed=derived_seed(cfg["seed"], "data", p))
               for p in range(1, int(cfg["participants"]) + 1)]
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid synth settings: {exc}") from None
    for p, fm in enumerate(fms, start=1):
        for s in range(1, int(cfg["sessions"]) + 1):
            sess = synth_session(fm, s, default_modality(p, s), proto, participant=p)
            write_session(sess, out / f"P{p:02d}" / f"S{s:02d}", extra=_stamp(cfg))


def cmd_ersp(cfg: dict, out: Path) -> None:
    ersp = _ersp_cfg(cfg["ersp"])
    if not cfg["sessions"]:
        raise ConfigError("ersp needs at least one session directory")
    for path in cfg["sessions"]:
        session = read_session(path)
        pairs = build_training_pairs(session, ersp)
        name = f"{session.participant_id}_S{session.session_index:02d}.ersp"
        write_ersp_cache(pairs, out / name, meta={**_stamp(cfg), "session": str(Path(path).name)})


def cmd_train(cfg: dict, out: Path) -> None:
    if not cfg["session"]:
        raise ConfigError("train needs --session")
    _, pairs = _pairs_for(cfg["session"], _ersp_cfg(cfg["ersp"]), cfg["ersp_cache"])
    hyper = hyper_from(cfg["hyper"])
    model = CnnLstmModel(hyper, pairs.input_shape, rng_seed=derived_seed(cfg["seed"], "init"))
    report = Trainer(model, pairs, _train_cfg(cfg["train"], derived_seed(cfg["seed"], "data"))).run()
    model.save(out / "model.bin", meta=_stamp(cfg))
    _write_json(out / "train_report.json", {**_stamp(cfg), **report.as_dict(),
                                            "weight_hash": model.weight_hash()})


def cmd_tune(cfg: dict, out: Path) -> None:
    log = Path(cfg["log"]) if cfg["log"] else out / "tuning_log.ndjson"
    configs = asha.sample_configs(asha.SearchSpace(), int(cfg["n_configs"]),
                                  derived_seed(cfg["seed"], "init"))
    if cfg["objective"] == "synthetic":
        objective = lambda hp, epochs: asha.noiseless_quality(hp)  # noqa: E731
        pairs = None
    elif cfg["objective"] == "train":
        if not cfg["session"]:
            raise ConfigError("tune with the training objective needs --session")
        _, pairs = _pairs_for(cfg["session"], _ersp_cfg(cfg["ersp"]))
        tcfg = _train_cfg(cfg["train"], derived_seed(cfg["seed"], "data"))
        objective = asha.TrainingObjective(pairs, tcfg, derived_seed(cfg["seed"], "init"),
                                           final_epochs=int(cfg["rungs"][-1]))
    else:
        raise ConfigError(f"unknown objective {cfg['objective']!r}")
    res = asha.run_asha(objective, configs, workers=int(cfg["workers"]), rungs=tuple(cfg["rungs"]),
                        eta=int(cfg["eta"]), simulated=bool(cfg["simulated"]), log_path=log)
    asha.verify_events(res.ledger.events, tuple(cfg["rungs"]), int(cfg["eta"]))
    summary = {**_stamp(cfg), "best_id": res.best_id, "best_loss": res.best_loss,
               "best_rung": res.best_rung,
               "best_config": res.best_config.as_dict() if res.best_config else None,
               "total_epochs": res.total_epochs,
               "rung_results": [{str(k): v for k, v in sorted(r.items())} for r in res.ledger.results],
               "failed": sorted(res.ledger.failed)}
    _write_json(out / "tuning_summary.json", summary)
    if pairs is not None and res.best_config is not None:
        model = CnnLstmModel(res.best_config, pairs.input_shape,
                             rng_seed=derived_seed(cfg["seed"], "init", "best"))
        Trainer(model, pairs, replace(tcfg, max_epochs=int(cfg["rungs"][-1]))).run()
        model.save(out / "best_model.bin", meta=_stamp(cfg))


def cmd_eval(cfg: dict, out: Path) -> None:
    ersp = _ersp_cfg(cfg["ersp"])
    if not cfg["sessions"]:
        raise ConfigError("eval needs session directories")
    try:
        spec = evaluation.StrategySpec(cfg["strategy"], folds=int(cfg["folds"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    by_participant = defaultdict(dict)
    for path in cfg["sessions"]:
        d = _session_pairs(path, ersp)
        by_participant[d.participant_id][d.session_index] = d
    factory = evaluation.DecoderFactory(hyper_from(cfg["hyper"]), _train_cfg(cfg["train"], 0))
    seed = derived_seed(cfg["seed"], "init")
    results = []
    for pid in sorted(by_participant):
        results.append(evaluation.run_strategy(spec, by_participant[pid], factory, seed,
                                               workers=int(cfg["workers"])))
    sessions = [r for res in results for r in res["sessions"]]
    aggregates = [res["aggregate"] for res in results]
    doc = {**_stamp(cfg), "strategy": spec.kind,
           "sessions": [r.as_dict() for r in sessions],
           "aggregates": [a.as_dict() for a in aggregates],
           "models": {pid: {str(k): v for k, v in res["models"].items()}
                      for pid, res in zip(sorted(by_participant), results)}}
    _write_json(out / "eval_report.json", doc)
    (out / "eval_report.csv").write_text(evaluation.reports_csv(sessions + aggregates))


def _epoch_pairs(cfg):
    if not cfg["sessions"]:
        raise ConfigError("needs session directories")
    return [connectivity.extract_epochs(read_session(p), condition=cfg["condition"])
            for p in cfg["sessions"]]


def _bands(cfg):
    try:
        return [band_by_name(b) for b in cfg["bands"]]
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None


def cmd_fc(cfg: dict, out: Path) -> None:
    bands = _bands(cfg)
    eps = _epoch_pairs(cfg)
    task = np.concatenate([e.task for e in eps])
    base = np.concatenate([e.baseline for e in eps])
    results = []
    for band in bands:
        res = connectivity.permutation_test(
            task, base, band, eps[0].sample_rate_hz, n_perm=int(cfg["n_perm"]),
            alpha=float(cfg["alpha"]), seed=derived_seed(cfg["seed"], "permutations", band.name),
            channels=eps[0].channels, display_threshold=float(cfg["display_threshold"]),
            workers=int(cfg["workers"]))
        results.append(res)
    (out / "fc_edges.csv").write_text(connectivity.edges_csv(results))
    _write_json(out / "fc_summary.json", {
        **_stamp(cfg),
        "bands": {r.band: {"threshold": r.threshold, "n_perm": r.n_perm,
                           "low_perm_warning": r.low_perm_warning,
                           "null_quantiles": {str(q): v for q, v in r.null_quantiles().items()},
                           "n_significant": int(np.triu(r.significant, 1).sum()),
                           "n_displayed": int(np.triu(r.displayed, 1).sum())} for r in results}})


def cmd_topo(cfg: dict, out: Path) -> None:
    bands = _bands(cfg)
    eps = _epoch_pairs(cfg)
    results = [connectivity.band_power_topo(eps, band) for band in bands]
    (out / "topo.csv").write_text(connectivity.topo_csv(results))
    _write_json(out / "topo_summary.json", {**_stamp(cfg),
                                            "floored": {r.band: r.floored for r in results}})


def cmd_report(cfg: dict, out: Path) -> None:
    docs = []
    for p in cfg["inputs"]:
        try:
            docs.append(json.loads(Path(p).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DecodeError(f"cannot read report {p}: {exc}") from None
    if not docs:
        raise ConfigError("report needs --inputs")
    versions = {d.get("format_version") for d in docs}
    if len(versions) != 1 or None in versions:
        raise DecodeError(f"refusing to merge reports with format versions {sorted(map(str, versions))}")
    # participant -> strategy -> modality -> axis -> [session-level r]
    table = defaultdict(lambda: defaultdict(lambda: defaultdict(lambda: defaultdict(list))))
    for d in docs:
        for s in d["sessions"]:
            for axis in (*AXES, "overall"):
                r = s["overall_r"] if axis == "overall" else s["axis_r"][axis]
                table[s["participant"]][s["strategy"]][s["modality"]][axis].append(r)
    mod_a, mod_b = cfg["modalities"]
    strategies = sorted({st for p in table.values() for st in p})
    rows = []
    for st in strategies:
        for axis in (*AXES, "overall"):
            a, b = [], []
            for pid in sorted(table):
                cell = table[pid][st]
                if cell[mod_a][axis] and cell[mod_b][axis]:
                    a.append(float(np.nanmean(cell[mod_a][axis])))
                    b.append(float(np.nanmean(cell[mod_b][axis])))
            row = {"strategy": st, "axis": axis, "n": len(a),
                   f"mean_{mod_a}": float(np.mean(a)) if a else None,
                   f"mean_{mod_b}": float(np.mean(b)) if b else None}
            if len(a) >= 2:
                row.update(paired_compare(b, a).as_dict())
            rows.append(row)
    _write_json(out / "summary.json", {"format_version": next(iter(versions)),
                                       "config_hash": config_hash(cfg), "rows": rows})
    cols = ["strategy", "axis", "n", f"mean_{mod_a}", f"mean_{mod_b}", "delta_mean", "t", "df",
            "p", "cohens_d", "degenerate"]
    lines = [",".join(cols)] + [",".join("" if row.get(c) is None else str(row.get(c)) for c in cols)
                                for row in rows]
    (out / "summary.csv").write_text("\n".join(lines) + "\n")


COMMANDS = {"synth": cmd_synth, "ersp": cmd_ersp, "train": cmd_train, "tune": cmd_tune,
            "eval": cmd_eval, "fc": cmd_fc, "topo": cmd_topo, "report": cmd_report}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trajdecode",
                                 description="Trajectory decoding toolkit for EEG reaching sessions.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, workers=False):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                       help="override any config key, e.g. hyper.learning_rate=0.0005")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="top-level seed")
        if workers:
            p.add_argument("--workers", type=int, help="parallel workers (1 = reference mode)")
        return p

    p = common(sub.add_parser("synth", help="write synthetic session directories"))
    p.add_argument("--participants", type=int, help="number of participants")
    p.add_argument("--sessions", type=int, help="sessions per participant")
    p.add_argument("--trials", type=int, help="trials per session (multiple of 16)")
    p.add_argument("--snr", type=float, help="modulation-to-background band power ratio")
    p.add_argument("--drift", type=float, help="per-session tuning drift in [0, 1]")

    p = common(sub.add_parser("ersp", help="build and cache ERSP features"), workers=True)
    p.add_argument("--sessions", nargs="+", help="session directories")

    p = common(sub.add_parser("train", help="fit one CNN-LSTM"))
    p.add_argument("--session", help="session directory")
    p.add_argument("--ersp-cache", dest="ersp_cache", help="ERSP cache from the ersp command")
    p.add_argument("--epochs", type=int, help="maximum epochs")

    p = common(sub.add_parser("tune", help="ASHA hyperparameter search"), workers=True)
    p.add_argument("--session", help="session directory")
    p.add_argument("--objective", choices=["train", "synthetic"], help="objective to minimise")
    p.add_argument("--n-configs", dest="n_configs", type=int, help="configurations to sample")
    p.add_argument("--log", help="NDJSON tuning log (resumed if it exists)")

    p = common(sub.add_parser("eval", help="run an evaluation strategy"), workers=True)
    p.add_argument("--sessions", nargs="+", help="session directories")
    p.add_argument("--strategy", choices=list(evaluation.STRATEGIES), help="FDG, SAT or WSR")
    p.add_argument("--epochs", type=int, help="maximum epochs per model")

    p = common(sub.add_parser("fc", help="EIC connectivity with permutation testing"), workers=True)
    p.add_argument("--sessions", nargs="+", help="session directories")
    p.add_argument("--bands", nargs="+", help="band names")
    p.add_argument("--n-perm", dest="n_perm", type=int, help="permutations")

    p = common(sub.add_parser("topo", help="movement-minus-rest band power"))
    p.add_argument("--sessions", nargs="+", help="session directories")
    p.add_argument("--bands", nargs="+", help="band names")

    p = common(sub.add_parser("report", help="merge eval reports into a modality comparison"))
    p.add_argument("--inputs", nargs="+", help="eval_report.json files")
    return ap


_SKIP = {"command", "config", "set", "epochs"}


def resolve(args: argparse.Namespace) -> dict:
    over = parse_set(args.set)
    for k, v in vars(args).items():
        if k in _SKIP or v is None:
            continue
        over[k] = v
    if getattr(args, "epochs", None) is not None:
        over.setdefault("train", {})["max_epochs"] = args.epochs
    return load_config(args.command, args.config, over)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, out, args.command)
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DecodeError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()


__all__ = ["main", "main_exit", "build_parser", "resolve", "CONFIG_FORMAT_VERSION"]
