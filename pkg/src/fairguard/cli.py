"""Command-line entry point: pretrain, train, verify, predict, audit."""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .fairness import (FairPredictor, UndecidedError, audit, audit_fair_predictor, enumerate_predict,
                       summarize)
from .milp import MilpError
from .network import ModelError, NetworkSpec, load_model, save_model
from .reporting import (record_row, summary_dict, write_csv, write_json, write_jsonl, write_manifest,
                        write_report)
from .schema import PREDICTION, SchemaError, load_dataset, load_schema
from .training import (CE_BATCH, FULL_BATCH, TrainConfig, TrainingError, ce_fair_train, pretrain)

log = logging.getLogger("fairguard")

EXIT_OK = 0
EXIT_CE = 1
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_UNKNOWN = 4
EXIT_UNDECIDED = 5

STRATEGY_FLAGS = {"full": FULL_BATCH, "ce": CE_BATCH}


class ConfigError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--schema", required=True, help="feature schema JSON")
    p.add_argument("--model", help="model JSON to read")
    p.add_argument("--data", help="CSV data (training data for pretrain/train, evaluation data otherwise)")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=None,
                   help="decision threshold on the probability (default: the model's, else 0.5)")
    p.add_argument("--rho", type=float, default=1.0, help="fraction of each batch searched for counterexamples")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-strategy", choices=sorted(STRATEGY_FLAGS), default="full")
    p.add_argument("--time-limit-ms", type=int, default=60000, help="per-sample solver time limit")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--max-solutions", type=int, default=None,
                   help="predict: count opposite labels by solution pool, at most this many per sample")
    p.add_argument("--oracle", action="store_true", help="predict: enumerate every assignment instead")
    p.add_argument("--allow-unknown", action="store_true", help="verify: do not fail on unknown outcomes")
    p.add_argument("--max-violation", action="store_true", help="verify: report the maximal violation")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--hidden", default="32,16", help="pretrain: hidden layer widths")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--train-data", help="audit: training CSV for retraining the model")
    p.add_argument("--retrained", help="audit: already retrained model JSON (skips retraining)")
    p.add_argument("--no-timings", dest="timings", action="store_false",
                   help="leave timing fields empty so reruns are byte-identical")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairguard", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("pretrain", "train a classifier with cross-entropy"),
                            ("train", "counterexample-guided fairness retraining"),
                            ("verify", "search counterexamples for every row"),
                            ("predict", "guaranteed-fair predictions by majority counting"),
                            ("audit", "four-way comparison of raw/retrained models with and without fair prediction")):
        _common(sub.add_parser(name, help=help_text))
    return parser


# ---------------------------------------------------------------------------
# helpers

def _need(args, *names):
    for name in names:
        value = getattr(args, name)
        if value is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required for {args.command}")
        if name != "hidden" and not Path(value).is_file():
            raise ConfigError(f"{value}: no such file")


def _load_schema(args):
    _need(args, "schema")
    return load_schema(args.schema)


def _load_net(args, path=None):
    net = load_model(path or args.model)
    if args.threshold is not None:
        net = NetworkSpec(net.weights, net.biases, args.threshold)
    return net


def _time_limit(args):
    return args.time_limit_ms / 1000.0


def _train_config(args, epochs_default) -> TrainConfig:
    epochs = epochs_default if args.epochs is None else args.epochs
    return TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=epochs, rho=args.rho,
                       strategy=STRATEGY_FLAGS[args.batch_strategy], seed=args.seed,
                       val_fraction=args.val_fraction, time_limit=_time_limit(args),
                       threads=args.threads)


def _config_dict(args) -> dict:
    skip = {"verbose", "out"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _epoch_row(rec, timings):
    row = rec.to_json()
    if not timings:
        row["seconds"] = None
    return row


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_pretrain(args) -> int:
    schema = _load_schema(args)
    _need(args, "data")
    data = load_dataset(schema, args.data)
    try:
        hidden = [int(w) for w in args.hidden.split(",") if w.strip()]
    except ValueError:
        raise ConfigError(f"--hidden must be comma-separated integers, got {args.hidden!r}") from None
    if any(w < 1 for w in hidden):
        raise ConfigError("hidden widths must be positive")
    cfg = _train_config(args, 50)
    threshold = 0.5 if args.threshold is None else args.threshold
    init = NetworkSpec.random([schema.input_dim, *hidden, 1], args.seed, threshold)
    net, records = pretrain(init, data, cfg)
    out = _out_dir(args)
    save_model(net, out / "model.json")
    write_jsonl(out / "pretrain_log.jsonl", [_epoch_row(r, args.timings) for r in records])
    write_manifest(out, "pretrain", {**_config_dict(args), "train_config": cfg.to_json()},
                   {"schema": args.schema, "data": args.data})
    best = min(records, key=lambda r: (r.val_loss, r.epoch))
    print(f"model written to {out / 'model.json'} (epoch {best.epoch}, validation accuracy "
          f"{best.val_accuracy:.4f})")
    return EXIT_OK


def _run_train(args, schema, data, net, out: Path, cfg: TrainConfig):
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)

    def on_epoch(rec, snap):
        save_model(snap, ckpt / f"epoch_{rec.epoch:03d}.json")
        print(f"epoch {rec.epoch}: val accuracy {rec.val_accuracy:.4f}, val ce rate "
              f"{rec.val_ce_rate:.4f}, {rec.n_counterexamples} counterexamples", flush=True)

    sel, chosen, _ = ce_fair_train(net, data, cfg, on_epoch=on_epoch)
    write_jsonl(out / "train_log.jsonl", [_epoch_row(r, args.timings) for r in sel.trajectory])
    write_json(out / "selection.json", {
        "chosen_epoch": sel.epoch,
        "distance": sel.distance,
        "criterion": "min euclidean distance of (1 - val accuracy, val ce rate) to (0, 0); ties to earliest",
        "epochs": [{"epoch": r.epoch, "val_accuracy": r.val_accuracy, "val_ce_rate": r.val_ce_rate,
                    "distance": d} for r, d in zip(sel.trajectory, sel.distances)],
    })
    return sel, chosen


def cmd_train(args) -> int:
    schema = _load_schema(args)
    _need(args, "model", "data")
    if args.epochs is not None and args.epochs < 1:
        raise ConfigError("--epochs must be at least 1")
    cfg = _train_config(args, 10)
    net = _load_net(args)
    data = load_dataset(schema, args.data)
    out = _out_dir(args)
    sel, chosen = _run_train(args, schema, data, net, out, cfg)
    save_model(chosen, out / "model.json")
    write_manifest(out, "train", {**_config_dict(args), "train_config": cfg.to_json()},
                   {"schema": args.schema, "model": args.model, "data": args.data})
    print(f"selected epoch {sel.epoch} (distance {sel.distance:.4f}); model written to {out / 'model.json'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    schema = _load_schema(args)
    _need(args, "model", "data")
    net = _load_net(args)
    data = load_dataset(schema, args.data)
    report = audit(net, schema, data, max_violation=args.max_violation, fair=False,
                   time_limit=_time_limit(args), threads=args.threads)
    out = _out_dir(args)
    write_report(out, "verify", report, args.timings)
    write_manifest(out, "verify", _config_dict(args),
                   {"schema": args.schema, "model": args.model, "data": args.data})
    print(f"ce rate {report.ce_rate:.4f} over {report.n - report.n_unknown} decided samples, "
          f"{report.n_unknown} unknown")
    if report.n_unknown and not args.allow_unknown:
        return EXIT_UNKNOWN
    return EXIT_CE if any(r.has_ce for r in report.records) else EXIT_OK


PREDICT_COLUMNS = ["sample_id", "raw_label", "fair_label", "flipped", "solve_ms"]


def cmd_predict(args) -> int:
    schema = _load_schema(args)
    _need(args, "model", "data")
    net = _load_net(args)
    data = load_dataset(schema, args.data)
    if args.max_solutions is not None and args.max_solutions < 1:
        raise ConfigError("--max-solutions must be positive")
    strategy = "pool" if args.max_solutions is not None else "count"
    predictor = FairPredictor(net, schema, strategy=strategy, time_limit=_time_limit(args))

    def one(i):
        x = data.X[i]
        start = time.perf_counter()
        if args.oracle:
            label = enumerate_predict(net, schema, x)
        else:
            label = predictor(x)
        return i, label, (time.perf_counter() - start) * 1000.0

    if strategy == "pool":
        from .schema import assignment_space
        size = assignment_space(schema, PREDICTION).size
        if size // 2 + 1 > args.max_solutions:
            raise ConfigError(f"--max-solutions {args.max_solutions} is below the {size // 2 + 1} "
                              "opposite labels a decision may need")
    try:
        if args.threads > 1 and not args.oracle:
            with ThreadPoolExecutor(args.threads) as pool:
                results = list(pool.map(one, range(len(data))))
        else:
            results = [one(i) for i in range(len(data))]
    except UndecidedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNDECIDED
    raw = net.decide_batch(data.X)
    rows = []
    for i, label, ms in results:
        rows.append({"sample_id": i, "raw_label": int(raw[i]), "fair_label": label,
                     "flipped": label != raw[i], "solve_ms": round(ms, 3) if args.timings else None})
    out = _out_dir(args)
    write_csv(out / "predict.csv", PREDICT_COLUMNS, rows)
    fair = np.array([r["fair_label"] for r in rows])
    summary = {
        "n": len(rows),
        "accuracy": float(np.mean(raw == data.y)),
        "fair_accuracy": float(np.mean(fair == data.y)),
        "flip_rate": float(np.mean(fair != raw)),
        "method": "enumeration" if args.oracle else strategy,
        "total_ms": round(sum(r[2] for r in results), 3) if args.timings else None,
    }
    write_json(out / "predict_summary.json", summary)
    write_manifest(out, "predict", _config_dict(args),
                   {"schema": args.schema, "model": args.model, "data": args.data})
    print(f"accuracy {summary['accuracy']:.4f}, fair accuracy {summary['fair_accuracy']:.4f}, "
          f"flip rate {summary['flip_rate']:.4f}")
    return EXIT_OK


AUDIT_COLUMNS = ["row", "model", "predictor", "n", "accuracy", "ce_rate", "flip_rate", "avg_violation",
                 "max_violation", "n_unknown", "fair_predict_seconds"]


TIMING_REPEATS = 5


def _fair_predict_seconds(nets, schema, X, time_limit, repeats=TIMING_REPEATS):
    """Best-of-``repeats`` fair prediction time over ``X`` for each network.

    Passes alternate between the networks, so slow drift in machine load
    affects them alike; a single pass over a small set is mostly timer noise.
    """
    best = [math.inf] * len(nets)
    for _ in range(repeats):
        for i, net in enumerate(nets):
            predictor = FairPredictor(net, schema, time_limit=time_limit)
            for x in X:
                try:
                    predictor(x)
                except UndecidedError:
                    pass
            best[i] = min(best[i], predictor.seconds)
    return best


def _model_rows(tag, name, net, schema, data, time_limit, threads, seconds):
    """Rows for a raw model and for fair prediction over it."""
    raw = audit(net, schema, data, max_violation=True, fair=True, time_limit=time_limit, threads=threads)
    predictor = FairPredictor(net, schema, time_limit=time_limit)
    ce_points = {r.sample_id: r.counterexample.point for r in raw.records if r.counterexample is not None}
    fair = audit_fair_predictor(predictor, data, extra_points=ce_points)
    rows = [
        {"row": tag[0], "model": name, "predictor": "raw", "n": raw.n, "accuracy": raw.accuracy,
         "ce_rate": raw.ce_rate, "flip_rate": raw.flip_rate, "avg_violation": raw.avg_violation,
         "max_violation": raw.max_violation, "n_unknown": raw.n_unknown},
        {"row": tag[1], "model": name, "predictor": "fair", "n": fair.n, "accuracy": fair.accuracy,
         "ce_rate": fair.ce_rate, "flip_rate": fair.flip_rate, "n_unknown": fair.n_unknown,
         "fair_predict_seconds": None if seconds is None else round(seconds, 4)},
    ]
    return rows, raw, fair


def cmd_audit(args) -> int:
    schema = _load_schema(args)
    _need(args, "model", "data")
    if args.retrained is None and args.train_data is None:
        raise ConfigError("audit needs --retrained MODEL or --train-data CSV to retrain")
    for path in (args.retrained, args.train_data):
        if path is not None and not Path(path).is_file():
            raise ConfigError(f"{path}: no such file")
    net = _load_net(args)
    data = load_dataset(schema, args.data)
    out = _out_dir(args)
    inputs = {"schema": args.schema, "model": args.model, "data": args.data,
              "retrained": args.retrained, "train_data": args.train_data}
    if args.retrained is not None:
        retrained = _load_net(args, args.retrained)
    else:
        cfg = _train_config(args, 10)
        if cfg.epochs < 1:
            raise ConfigError("--epochs must be at least 1")
        train_dir = out / "train"
        train_dir.mkdir(exist_ok=True)
        _, retrained = _run_train(args, schema, load_dataset(schema, args.train_data), net, train_dir, cfg)
        save_model(retrained, train_dir / "model.json")
    limit = _time_limit(args)
    seconds = (_fair_predict_seconds([net, retrained], schema, data.X, limit) if args.timings
               else [None, None])
    rows_raw, raw_a, fair_b = _model_rows("ab", "raw", net, schema, data, limit, args.threads, seconds[0])
    rows_new, raw_c, fair_d = _model_rows("cd", "retrained", retrained, schema, data, limit, args.threads,
                                          seconds[1])
    rows = rows_raw + rows_new
    write_csv(out / "audit.csv", AUDIT_COLUMNS, rows)
    write_json(out / "audit.json", {"rows": rows})
    for stem, rep in (("audit_a", raw_a), ("audit_b", fair_b), ("audit_c", raw_c), ("audit_d", fair_d)):
        write_report(out, stem, rep, args.timings)
    write_manifest(out, "audit", _config_dict(args), inputs)
    print(f"{'row':<4}{'predictor':<22}{'accuracy':>10}{'ce_rate':>10}{'flip_rate':>10}")
    for r in rows:
        label = f"{r['model']}/{r['predictor']}"
        print(f"{r['row']:<4}{label:<22}{r['accuracy']:>10.4f}{r['ce_rate']:>10.4f}{r['flip_rate']:>10.4f}")
    unknown = sum(r["n_unknown"] for r in rows)
    return EXIT_UNKNOWN if unknown and not args.allow_unknown else EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "train": cmd_train, "verify": cmd_verify, "predict": cmd_predict,
            "audit": cmd_audit}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if not 0.0 < (args.threshold if args.threshold is not None else 0.5) < 1.0:
            raise ConfigError("--threshold must lie in (0, 1)")
        if args.threads < 1 or args.time_limit_ms <= 0:
            raise ConfigError("--threads and --time-limit-ms must be positive")
        if not 0.0 < args.rho <= 1.0:
            raise ConfigError("--rho must lie in (0, 1]")
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, ModelError, ValueError, MilpError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
