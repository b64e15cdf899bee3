"""Command line entry point: ``ghnn {train,eval,predict-link,predict-time,make-synth}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import model as gm
from .numerics import no_grad, precision
from .synth import SynthSpec, generate
from .tkg_store import DataError, Direction, build_slice_index, history_for, load_dataset, save_dataset
from .training import NumericError, TrainConfig, Trainer, load_checkpoint, save_checkpoint, train

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("ghnn")


class UsageError(Exception):
    pass


# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "lr": "lr", "batch_size": "batch_size", "embed_dim": "embed_dim", "hidden_dim": "hidden_dim",
    "history_len": "max_history", "weight_decay": "weight_decay", "nu": "nu", "epochs": "epochs",
    "seed": "seed", "time_branch_combine": "time_combine", "softplus_scale": "softplus_scale",
    "psi": "psi", "readout": "readout", "z_activation": "z_activation", "horizon": "horizon",
    "grid_points": "grid_points", "eval_grid_points": "eval_grid_points", "precision": "precision",
    "eval_every": "eval_every", "protocol": "protocol",
}


def _parse_value(field_type, raw: str):
    ft = str(field_type)
    if "bool" in ft:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if "int" in ft:
        return int(raw)
    if "float" in ft:
        return None if raw.strip().lower() in ("", "none") else float(raw)
    return raw.strip()


def _read_config_file(path) -> tuple[dict, dict]:
    """INI file with ``[data]`` (path, time_scale) and ``[train]`` (TrainConfig keys) sections."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise UsageError(f"cannot read config file {path}")
    types = {f.name: f.type for f in fields(TrainConfig)}
    train_vals = {}
    if parser.has_section("train"):
        for key, raw in parser.items("train"):
            if key not in types:
                raise UsageError(f"{path}: unknown [train] key {key!r}")
            train_vals[key] = _parse_value(types[key], raw)
    data_vals = dict(parser.items("data")) if parser.has_section("data") else {}
    return data_vals, train_vals


def _write_resolved_config(path: Path, data_dir: str, time_scale: float, cfg: TrainConfig) -> None:
    parser = configparser.ConfigParser()
    parser["data"] = {"path": str(data_dir), "time_scale": repr(time_scale)}
    parser["train"] = {k: str(v) for k, v in asdict(cfg).items()}
    with open(path, "w") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    data_vals, train_vals = _read_config_file(args.config) if args.config else ({}, {})
    for flag, fname in TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            train_vals[fname] = value
    data_dir = args.data or data_vals.get("path")
    if not data_dir:
        raise UsageError("--data is required (or [data] path in the config file)")
    time_scale = args.time_scale if args.time_scale is not None else float(data_vals.get("time_scale", 1.0))
    cfg = TrainConfig(**train_vals)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = load_dataset(data_dir, time_scale)
    run_dir = Path(args.out or f"runs/run-{time.strftime('%Y%m%d-%H%M%S')}")
    run_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(dataset, cfg, str(Path(data_dir).resolve()))
    _write_resolved_config(run_dir / "config.ini", str(Path(data_dir).resolve()), time_scale, cfg)
    print(json.dumps({"run_dir": str(run_dir), "config": asdict(cfg)}), flush=True)

    def echo(record):
        print(json.dumps(record), flush=True)

    try:
        result = train(dataset, cfg, run_dir, trainer=trainer, on_epoch=echo)
    except NumericError as exc:
        ckpt = trainer.checkpoint()
        save_checkpoint(ckpt, run_dir / "failed")
        (run_dir / "failure.txt").write_text(str(exc) + "\n")
        raise
    print(json.dumps({"done": True, "epochs": len(result.history), "run_dir": str(run_dir)}), flush=True)
    return 0


def _resolve_checkpoint(path) -> Path:
    path = Path(path)
    if (path / "manifest.json").exists():
        return path
    for sub in ("best", "last"):
        if (path / sub / "manifest.json").exists():
            return path / sub
    raise UsageError(f"no checkpoint found in {path}")


def _load_for_inference(args):
    ckpt = load_checkpoint(_resolve_checkpoint(args.checkpoint))
    data_dir = args.data or ckpt.data_dir
    if not data_dir:
        raise UsageError("--data is required (checkpoint does not record a dataset path)")
    dataset = load_dataset(data_dir, ckpt.time_scale)
    if dataset.num_entities != ckpt.model.config.num_entities or \
            dataset.num_predicates != ckpt.model.config.num_predicates:
        raise DataError("checkpoint and dataset vocabularies do not match")
    return ckpt, dataset


def cmd_eval(args) -> int:
    ckpt, dataset = _load_for_inference(args)
    cfg = ckpt.config
    report = ev.evaluate(ckpt.model, dataset, args.split, args.protocol, cfg.max_history,
                         horizon=cfg.horizon, grid_points=cfg.eval_grid_points, renormalize=cfg.renormalize,
                         train_only_history=args.train_only_history, threads=args.threads,
                         protocols=list(ev.PROTOCOLS) if args.all_protocols else None)
    quads = dataset.split(args.split)
    if args.dump:
        ev.write_dump(report, quads, args.dump)
    if args.scores:
        ev.save_scores(report, quads, args.scores)
    if args.report:
        ev.write_report(report, args.report)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def _parse_query(text: str, expect: str) -> list:
    parts = text.replace(",", " ").split()
    if len(parts) != 4 or parts.count("?") != 1:
        raise UsageError(f"query must look like {expect!r}, got {text!r}")
    return parts


def _entity_name(dataset, i: int) -> str:
    names = dataset.vocab.entity_names
    return names.get(i, str(i)) if names else str(i)


def cmd_predict_link(args) -> int:
    s, p, o, t = _parse_query(args.query, "s p ? t")
    if t == "?" or (s == "?") == (o == "?"):
        raise UsageError("predict-link needs exactly one of subject/object as '?' and a timestamp")
    ckpt, dataset = _load_for_inference(args)
    t = float(t) * ckpt.time_scale
    facts = dataset.all_quadruples()
    if facts and t < min(q.timestamp for q in facts):
        raise UsageError("query precedes history")
    direction = Direction.SUBJECT if o == "?" else Direction.OBJECT
    anchor = int(s) if o == "?" else int(o)
    index = build_slice_index(facts)
    hist = history_for(index, anchor, int(p), direction, t, ckpt.config.max_history)
    model = ckpt.model
    with no_grad(), precision(model.dtype):
        enc = gm.encode_history(model, hist)
        logits = np.asarray(gm.candidate_logits(model, enc, t).data[0], dtype=np.float64)
    log_lam = np.log(model.s * np.logaddexp(0.0, logits / model.s))
    lam = np.exp(log_lam)
    prob = np.exp(log_lam - log_lam.max())
    prob /= prob.sum()
    order = np.argsort(-logits, kind="stable")[: args.top_k]
    print("rank\tentity\tname\tintensity\tsoftmax")
    for r, c in enumerate(order, 1):
        print(f"{r}\t{c}\t{_entity_name(dataset, int(c))}\t{lam[c]:.6g}\t{prob[c]:.6g}")
    return 0


def cmd_predict_time(args) -> int:
    s, p, o, q = _parse_query(args.query, "s p o ?")
    if q != "?":
        raise UsageError("predict-time query must end with '?'")
    ckpt, dataset = _load_for_inference(args)
    facts = dataset.all_quadruples()
    cutoff = float(args.at) * ckpt.time_scale if args.at is not None else np.inf
    if facts and cutoff < min(q.timestamp for q in facts):
        raise UsageError("query precedes history")
    index = build_slice_index(facts)
    s, p, o = int(s), int(p), int(o)
    cfg = ckpt.config
    hs = history_for(index, s, p, Direction.SUBJECT, cutoff, cfg.max_history)
    ho = history_for(index, o, p, Direction.OBJECT, cutoff, cfg.max_history)
    if not len(hs) and not len(ho):
        raise UsageError("no history for this triplet; cannot anchor a time prediction")
    model = ckpt.model
    with no_grad(), precision(model.dtype):
        pred = gm.time_density_and_expectation(
            model, gm.encode_history(model, hs), gm.encode_history(model, ho), [(s, p, o)],
            cfg.horizon, args.grid_points or cfg.eval_grid_points, cfg.renormalize)
    t_hat = float(pred.expected.data[0]) / ckpt.time_scale
    print(json.dumps({"query": [s, p, o], "t_last": float(pred.grid[0, 0]) / ckpt.time_scale,
                      "expected_time": t_hat, "mass": float(pred.mass.data[0])}))
    if args.curve:
        with open(args.curve, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "p(t)"])
            for tt, pp in zip(pred.grid[0] / ckpt.time_scale, pred.density.data[0]):
                w.writerow([f"{tt:.6g}", f"{pp:.6g}"])
    return 0


def cmd_make_synth(args) -> int:
    spec = SynthSpec(n_entities=args.entities, n_predicates=args.predicates, n_events=args.events,
                     seed=args.seed, mode=args.mode, n_types=args.types, min_period=args.min_period,
                     max_period=args.max_period, mu=args.mu, alpha=args.alpha, beta=args.beta,
                     tick=args.tick, horizon=args.horizon)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = generate(spec)
    save_dataset(dataset, args.out)
    print(json.dumps({"out": str(args.out), "train": len(dataset.train), "valid": len(dataset.valid),
                      "test": len(dataset.test), "time_scale": dataset.time_scale}))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ghnn", allow_abbrev=False,
                                 description="Graph Hawkes neural network for temporal knowledge graphs")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", allow_abbrev=False, help="train a model; writes a run directory")
    t.add_argument("--data")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--time-scale", type=float)
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--embed-dim", type=int)
    t.add_argument("--hidden-dim", type=int)
    t.add_argument("--history-len", type=int)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--nu", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--time-branch-combine", choices=["mean", "sum"])
    t.add_argument("--softplus-scale", type=float)
    t.add_argument("--psi", type=float)
    t.add_argument("--readout", choices=["gate", "embedding"])
    t.add_argument("--z-activation", choices=["sigmoid", "tanh"])
    t.add_argument("--horizon", type=float)
    t.add_argument("--grid-points", type=int)
    t.add_argument("--eval-grid-points", type=int)
    t.add_argument("--precision", choices=["standard", "extended"])
    t.add_argument("--eval-every", type=int)
    t.add_argument("--protocol", choices=list(ev.PROTOCOLS))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", allow_abbrev=False, help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", default="test", choices=["train", "valid", "test"])
    e.add_argument("--protocol", default="time-aware", choices=list(ev.PROTOCOLS))
    e.add_argument("--all-protocols", action="store_true")
    e.add_argument("--dump")
    e.add_argument("--scores", help="write the score matrix (.npz) for external re-ranking")
    e.add_argument("--report")
    e.add_argument("--train-only-history", action="store_true")
    e.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("predict-link", allow_abbrev=False, help='rank candidates for "s p ? t" or "? p o t"')
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--data")
    pl.add_argument("--top-k", type=int, default=10)
    pl.add_argument("query")
    pl.set_defaults(func=cmd_predict_link)

    pt = sub.add_parser("predict-time", allow_abbrev=False, help='expected next time of "s p o ?"')
    pt.add_argument("--checkpoint", required=True)
    pt.add_argument("--data")
    pt.add_argument("--at", type=float, help="history cutoff (default: after all known facts)")
    pt.add_argument("--curve", help="write the density curve as CSV (t, p(t))")
    pt.add_argument("--grid-points", type=int)
    pt.add_argument("query")
    pt.set_defaults(func=cmd_predict_time)

    ms = sub.add_parser("make-synth", allow_abbrev=False, help="write a synthetic dataset")
    ms.add_argument("--mode", choices=["periodic", "hawkes"], default="periodic")
    ms.add_argument("--out", required=True)
    ms.add_argument("--entities", type=int, default=20)
    ms.add_argument("--predicates", type=int, default=2)
    ms.add_argument("--events", type=int, default=600)
    ms.add_argument("--types", type=int)
    ms.add_argument("--seed", type=int, default=0)
    ms.add_argument("--min-period", type=int, default=2)
    ms.add_argument("--max-period", type=int, default=6)
    ms.add_argument("--mu", type=float, default=0.5)
    ms.add_argument("--alpha", type=float, default=0.4)
    ms.add_argument("--beta", type=float, default=1.0)
    ms.add_argument("--tick", type=float, default=1.0)
    ms.add_argument("--horizon", type=float)
    ms.set_defaults(func=cmd_make_synth)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ghnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"ghnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"ghnn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"ghnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
