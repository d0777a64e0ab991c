"""``comfort`` command line: synth, train, cv, gridsearch, predict, serve, summary, config.

Every command reads one JSON config (``--config``; defaults from
``comfort config init``) and a handful of flag overrides. All randomness
comes from seeds in the config. Exit codes: 0 success, 1 usage or
validation error, 2 I/O or startup error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .evaluation import (
    DEFAULT_GRID,
    MODEL_ALIASES,
    cross_validate,
    dataset_summary,
    grid_search,
    make_spec,
    render_table,
    reports_to_json,
)
from .ingest import ConfigError, DataError, ImputeError, encode, fit_encoder, generate_synthetic, load_csv
from .ingest import load_synthetic_spec, write_csv
from .baselines import DEFAULT_PARAMS
from .mtl import Hyperparams, ModelFileError, PredictError, fit_mtl, load_model, predict_records, save_model
from .nn import DivergenceError
from .schema import DatasetSchema, SchemaError, default_schema, load_schema

log = logging.getLogger("comfortmtl")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3

ALL_MODELS = ["mtl", "svm", "rf", "dt", "knn", "adaboost", "dnn"]


class UsageError(Exception):
    pass


def _hp_section(hp: Hyperparams) -> dict[str, Any]:
    """Hyperparameters as config JSON; the run seed lives at the top level instead."""
    d = hp.to_dict()
    del d["seed"]
    return d


def default_config() -> dict[str, Any]:
    """Every recognised config key with its default value."""
    return {
        "schema": None,
        "data": None,
        "out": "out",
        "seed": 0,
        "k": 5,
        "averaging": "macro",
        "models": list(ALL_MODELS),
        "hyperparams": _hp_section(Hyperparams()),
        "baselines": copy.deepcopy({k: v for k, v in DEFAULT_PARAMS.items() if v}),
        "grid": copy.deepcopy(DEFAULT_GRID),
        "synth": {"n": 2000, "seed": 0, "spec": None, "illogical": None},
        "predict": {"model": None},
        "serve": {"host": "127.0.0.1", "port": 8080, "model": None},
        "summary": {"by": None},
    }


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict) and key not in ("grid", "baselines",
                                                                                     "hyperparams"):
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None) -> dict[str, Any]:
    cfg = default_config()
    if path is None:
        return cfg
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    cfg = _merge(cfg, doc)
    if "seed" in cfg["hyperparams"]:
        raise UsageError("set the seed at the top level of the config, not under hyperparams")
    try:
        Hyperparams.from_dict({**cfg["hyperparams"], "seed": cfg["seed"]})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config hyperparams: {exc}") from None
    return cfg


# ------------------------------------------------------------------ argparse

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="comfort", description="Multi-task thermal comfort modelling.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run config (see 'comfort config init')")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="run seed")
        if data:
            sp.add_argument("--data", help="input CSV")
            sp.add_argument("--schema", help="schema JSON (default: built-in survey schema)")

    sp = sub.add_parser("synth", help="write a seeded synthetic survey CSV")
    common(sp, data=False)
    sp.add_argument("--n", type=int, help="number of rows")
    sp.add_argument("--spec", help="synthetic spec JSON")
    sp.add_argument("--illogical", type=float, help="fraction of resampled illogical votes")
    sp.add_argument("--output", help="CSV path (default: <out>/synthetic.csv)")

    sp = sub.add_parser("train", help="train the multi-task network")
    common(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--learning-rate", type=float)

    sp = sub.add_parser("cv", help="k-fold cross-validation of the network and baselines")
    common(sp)
    sp.add_argument("--models", help=f"comma list from {','.join(ALL_MODELS)}")
    sp.add_argument("--k", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--averaging", choices=["macro", "weighted"])

    sp = sub.add_parser("gridsearch", help="hyperparameter grid search")
    common(sp)
    sp.add_argument("--k", type=int)
    sp.add_argument("--grid", help="JSON object of axis -> values")

    sp = sub.add_parser("predict", help="predict every row of a CSV")
    common(sp)
    sp.add_argument("--model", help="model file (default: <out>/model.json)")

    sp = sub.add_parser("serve", help="serve POST /predict and GET /health")
    common(sp, data=False)
    sp.add_argument("--model", help="model file (default: <out>/model.json)")
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)

    sp = sub.add_parser("summary", help="descriptive statistics of a CSV")
    common(sp)
    sp.add_argument("--by", help="categorical feature for group means")

    sp = sub.add_parser("config", help="config utilities")
    csub = sp.add_subparsers(dest="action", required=True, parser_class=_Parser)
    ci = csub.add_parser("init", help="print or write the full default config")
    ci.add_argument("--output", help="write to this path instead of stdout")
    return p


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(cfg)
    for key in ("out", "data", "schema", "k", "averaging"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
        cfg["synth"]["seed"] = args.seed
    if getattr(args, "models", None):
        cfg["models"] = [m.strip() for m in args.models.split(",") if m.strip()]
    if getattr(args, "epochs", None) is not None:
        cfg["hyperparams"]["epochs"] = args.epochs
    if getattr(args, "learning_rate", None) is not None:
        cfg["hyperparams"]["learning_rate"] = args.learning_rate
    if getattr(args, "grid", None):
        try:
            cfg["grid"] = json.loads(args.grid)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--grid is not valid JSON: {exc}") from None
    for key in ("n", "spec", "illogical"):
        if getattr(args, key, None) is not None:
            cfg["synth"][key] = getattr(args, key)
    if getattr(args, "model", None):
        cfg["predict"]["model"] = args.model
        cfg["serve"]["model"] = args.model
    for key in ("host", "port"):
        if getattr(args, key, None) is not None:
            cfg["serve"][key] = getattr(args, key)
    if getattr(args, "by", None):
        cfg["summary"]["by"] = args.by
    return cfg


# ------------------------------------------------------------------ helpers

def _schema(cfg) -> DatasetSchema:
    return load_schema(cfg["schema"]) if cfg["schema"] else default_schema()


def _hyperparams(cfg) -> Hyperparams:
    try:
        return Hyperparams.from_dict({**cfg["hyperparams"], "seed": int(cfg["seed"])})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad hyperparams: {exc}") from None


def _load_data(cfg, schema: DatasetSchema):
    if not cfg["data"]:
        raise UsageError("no input data: pass --data or set 'data' in the config")
    ds = load_csv(cfg["data"], schema)
    problems = ds.violations()
    if problems:
        lines = [f"row {i + 1}: " + "; ".join(str(v) for v in vs) for i, vs in sorted(problems.items())]
        raise DataError("schema violations:\n  " + "\n  ".join(lines[:50])
                        + (f"\n  ... {len(lines) - 50} more" if len(lines) > 50 else ""))
    return ds


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# ----------------------------------------------------------------- commands

def cmd_synth(cfg) -> int:
    s = cfg["synth"]
    if s["n"] is None or int(s["n"]) < 1:
        raise UsageError("--n must be >= 1")
    spec = load_synthetic_spec(s["spec"])
    if s["illogical"] is not None:
        spec["illogical_fraction"] = float(s["illogical"])
    ds = generate_synthetic(int(s["n"]), int(s["seed"]), spec, _schema(cfg))
    path = Path(s.get("output") or Path(cfg["out"]) / "synthetic.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, path)
    print(f"wrote {len(ds)} rows to {path}")
    return EXIT_OK


def cmd_train(cfg) -> int:
    schema = _schema(cfg)
    ds = _load_data(cfg, schema)
    hp = _hyperparams(cfg)
    enc = fit_encoder(ds)
    data = encode(enc, ds)
    net, hist = fit_mtl(enc, data, hp, schema)
    out = _out_dir(cfg)
    checksum = save_model(net, out / "model.json")
    _write(out / "history.csv", hist.to_csv())
    print(f"trained {hp.epochs} epochs on {len(ds)} rows; final loss {hist.loss[-1]:.6f}")
    print(f"model {out / 'model.json'} checksum {checksum}")
    return EXIT_OK


def _specs(cfg):
    hp = _hyperparams(cfg)
    names = cfg["models"]
    unknown = [m for m in names if m not in MODEL_ALIASES]
    if unknown or not names:
        raise UsageError(f"unknown models {unknown}; choose from {','.join(ALL_MODELS)}")
    return [make_spec(m, hp, cfg["baselines"]) for m in names]


def cmd_cv(cfg) -> int:
    schema = _schema(cfg)
    ds = _load_data(cfg, schema)
    k = int(cfg["k"])
    if k < 2:
        raise UsageError("k must be >= 2")
    reports = []
    for spec in _specs(cfg):
        log.info("cross-validating %s", spec.name)
        reports.append(cross_validate(spec, ds, k, int(cfg["seed"]), cfg["averaging"]))
    out = _out_dir(cfg)
    text = render_table(reports)
    _write(out / "report.json", reports_to_json(reports) + "\n")
    _write(out / "report.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_gridsearch(cfg) -> int:
    schema = _schema(cfg)
    ds = _load_data(cfg, schema)
    grid = cfg["grid"]
    if not isinstance(grid, dict) or not grid:
        raise UsageError("grid must be a non-empty object of axis -> values")
    allowed = {"depth"} | set(Hyperparams.__dataclass_fields__) - {"seed"}
    bad = set(grid) - allowed
    if bad:
        raise UsageError(f"unknown grid axes {sorted(bad)}")
    res = grid_search(grid, ds, int(cfg["k"]), int(cfg["seed"]), _hyperparams(cfg))
    out = _out_dir(cfg)
    _write(out / "report.json", json.dumps(res.to_dict(), indent=1, sort_keys=True) + "\n")
    lines = ["rank | status | objective (mean macro-F1) | params"]
    for rank, c in enumerate(res.cells, 1):
        score = f"{c.score:.4f}" if c.ok else c.error
        lines.append(f"{rank} | {'ok' if c.ok else 'failed'} | {score} | {json.dumps(c.params, sort_keys=True)}")
    _write(out / "report.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    if not any(c.ok for c in res.cells):
        print("every grid cell diverged", file=sys.stderr)
        return EXIT_DIVERGED
    best = copy.deepcopy(cfg)
    best["hyperparams"] = _hp_section(res.best_hyperparams)
    _write(out / "best_config.json", json.dumps(best, indent=1, sort_keys=True) + "\n")
    print(f"best: {json.dumps(res.best.params, sort_keys=True)} -> {out / 'best_config.json'}")
    return EXIT_OK


def _model_path(cfg, section: str) -> Path:
    p = cfg[section]["model"]
    return Path(p) if p else Path(cfg["out"]) / "model.json"


def cmd_predict(cfg) -> int:
    net = load_model(_model_path(cfg, "predict"))
    if not cfg["data"]:
        raise UsageError("no input data: pass --data or set 'data' in the config")
    ds = load_csv(cfg["data"], net.schema)
    preds = predict_records(net, ds.records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["row"]
    for t in net.task_names:
        header += [t, f"{t}_label", f"{t}_prob"]
    w.writerow(header)
    for i, row in enumerate(preds, 1):
        cells = [str(i)]
        for t in net.task_names:
            p = row[t]
            cells += [str(p.value), p.label, repr(float(p.probs.max()))]
        w.writerow(cells)
    out = _out_dir(cfg)
    _write(out / "predictions.csv", buf.getvalue())
    print(f"wrote {len(preds)} predictions to {out / 'predictions.csv'}")
    return EXIT_OK


def cmd_serve(cfg) -> int:
    from .server import make_server

    net = load_model(_model_path(cfg, "serve"))
    host, port = cfg["serve"]["host"], int(cfg["serve"]["port"])
    server = make_server(net, host, port)
    print(f"serving on http://{host}:{server.server_address[1]} (model checksum {net.checksum})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_summary(cfg) -> int:
    schema = _schema(cfg)
    if not cfg["data"]:
        raise UsageError("no input data: pass --data or set 'data' in the config")
    ds = load_csv(cfg["data"], schema)
    summary = dataset_summary(ds, cfg["summary"]["by"])
    out = _out_dir(cfg)
    text = json.dumps(summary, indent=1, sort_keys=True) + "\n"
    _write(out / "report.json", text)
    lines = [f"rows: {summary['n']}"]
    for name, s in summary["features"].items():
        if "mean" in s:
            lines.append(f"{name}: mean {s['mean']:.3f} sd {s['std']:.3f} median {s['median']:.3f} "
                         f"missing {s['missing']}")
        else:
            lines.append(f"{name}: {s.get('counts', {})} missing {s['missing']}")
    for t, s in summary["tasks"].items():
        lines.append(f"{t}: {s['counts']} missing {s['missing']}")
    _write(out / "report.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_config(args) -> int:
    text = json.dumps(default_config(), indent=1, sort_keys=True) + "\n"
    if args.output:
        _write(Path(args.output), text)
        print(f"wrote default config to {args.output}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "cv": cmd_cv,
    "gridsearch": cmd_gridsearch,
    "predict": cmd_predict,
    "serve": cmd_serve,
    "summary": cmd_summary,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"comfort: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "config":
            return cmd_config(args)
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "synth" and getattr(args, "output", None):
            cfg["synth"]["output"] = args.output
        return COMMANDS[args.command](cfg)
    except DivergenceError as exc:
        epoch = f" (epoch {exc.epoch})" if getattr(exc, "epoch", None) else ""
        print(f"comfort: training diverged{epoch}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ModelFileError as exc:
        print(f"comfort: cannot load model: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, SchemaError, DataError, ImputeError, PredictError, ValueError) as exc:
        print(f"comfort: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"comfort: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
