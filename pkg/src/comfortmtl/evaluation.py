"""Cross-validation, grid search, slice reports, feature ablation and dataset summaries."""

from __future__ import annotations

import itertools
import json
import math
import statistics
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .baselines import DEFAULT_PARAMS, KINDS, fit_single_task
from .ingest import EncodedDataset, Encoder, encode, fit_encoder, kfold_split, FoldPlan
from .metrics import ClassMetrics, ConfusionMatrix, confusion, macro_metrics
from .mtl import DEFAULT_TRUNK, Hyperparams, MtlNetwork, init_network, train, trunk_for_depth
from .nn import DivergenceError
from .schema import MISSING, Dataset, DatasetSchema

AVERAGING_MODES = ("macro", "weighted")

MODEL_ALIASES = {
    "mtl": "mtl",
    "svm": "linear_svm",
    "linear_svm": "linear_svm",
    "rf": "random_forest",
    "random_forest": "random_forest",
    "dt": "decision_tree",
    "decision_tree": "decision_tree",
    "knn": "knn",
    "adaboost": "adaboost",
    "dnn": "stl_dnn",
    "stl_dnn": "stl_dnn",
}

DISPLAY_NAMES = {
    "mtl": "MTL network",
    "linear_svm": "SVM",
    "random_forest": "Random Forest",
    "decision_tree": "Decision Tree",
    "knn": "KNN",
    "adaboost": "AdaBoost",
    "stl_dnn": "DNN",
}


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([int(seed) % 2**64, 7, fold]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------- model specs

class FittedModel:
    def predict_indices(self, X) -> dict[str, np.ndarray]:
        raise NotImplementedError


@dataclass
class _FittedNet(FittedModel):
    net: MtlNetwork

    def predict_indices(self, X):
        return self.net.predict_indices(X)


@dataclass
class _FittedPerTask(FittedModel):
    models: dict

    def predict_indices(self, X):
        return {t: m.predict_indices(X) for t, m in self.models.items()}


@dataclass
class MtlSpec:
    """Recipe for the shared-trunk network; the fold seed replaces ``hyperparams.seed``."""

    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    name: str = "MTL network"

    def fit(self, encoder: Encoder, train_set: EncodedDataset, seed: int) -> FittedModel:
        net = init_network(train_set.schema, encoder, self.hyperparams.replace(seed=seed))
        train(net, train_set)
        return _FittedNet(net)

    def n_parameters(self, schema: DatasetSchema, input_dim: int) -> int:
        n = 0
        w = input_dim
        for s in self.hyperparams.trunk_sizes:
            n += w * s + s
            w = s
        for t in schema.tasks:
            hw = w
            for s in tuple(self.hyperparams.head_hidden_sizes.get(t.name, ())) + (t.n_classes,):
                n += hw * s + s
                hw = s
        return n

    def describe(self) -> dict:
        return {"model": "mtl", "hyperparams": self.hyperparams.to_dict()}


@dataclass
class BaselineSpec:
    """One single-task model per task, all of the same ``kind``."""

    kind: str
    params: dict = field(default_factory=dict)
    hyperparams: Hyperparams | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if not self.name:
            self.name = DISPLAY_NAMES[self.kind]

    def fit(self, encoder, train_set, seed):
        models = {}
        for i, t in enumerate(train_set.schema.task_names):
            s = seed if self.kind == "stl_dnn" else fold_seed(seed, i)
            models[t] = fit_single_task(self.kind, encoder, train_set, t, self.params, s, self.hyperparams)
        return _FittedPerTask(models)

    def describe(self) -> dict:
        d = {"model": self.kind, "params": {**DEFAULT_PARAMS[self.kind], **self.params}}
        if self.kind == "stl_dnn":
            d["hyperparams"] = (self.hyperparams or Hyperparams()).to_dict()
        return d


def make_spec(name: str, hyperparams: Hyperparams | None = None,
              baseline_params: Mapping[str, Mapping] | None = None):
    kind = MODEL_ALIASES.get(name)
    if kind is None:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_ALIASES)}")
    hp = hyperparams or Hyperparams()
    if kind == "mtl":
        return MtlSpec(hp)
    return BaselineSpec(kind, dict((baseline_params or {}).get(kind, {})), hp if kind == "stl_dnn" else None)


# ----------------------------------------------------------- cross-validation

METRIC_KEYS = ("accuracy", "macro_precision", "macro_recall", "macro_f1",
               "weighted_precision", "weighted_recall", "weighted_f1")


@dataclass
class CVReport:
    name: str
    k: int
    seed: int
    averaging: str
    tasks: tuple[str, ...]
    folds: list[dict[str, ClassMetrics | None]]
    pooled: dict[str, ClassMetrics]
    absent: list[tuple[int, str]]
    plan: FoldPlan
    oof: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def fold_values(self, task: str, key: str) -> list[float]:
        return [getattr(f[task], key) for f in self.folds if f[task] is not None]

    def mean(self, task: str, key: str) -> float:
        vals = self.fold_values(task, key)
        return float(np.mean(vals)) if vals else float("nan")

    def std(self, task: str, key: str) -> float:
        vals = self.fold_values(task, key)
        return float(np.std(vals)) if vals else float("nan")

    def headline(self, task: str) -> tuple[float, float, float]:
        pre = "macro" if self.averaging == "macro" else "weighted"
        return tuple(self.mean(task, f"{pre}_{m}") for m in ("precision", "recall", "f1"))

    def accuracy(self, task: str) -> float:
        return self.mean(task, "accuracy")

    def macro_f1(self, task: str) -> float:
        return self.mean(task, "macro_f1")

    def objective(self) -> float:
        """Mean over tasks of the fold-mean macro-F1."""
        return float(np.mean([self.macro_f1(t) for t in self.tasks]))

    def to_dict(self) -> dict:
        per_task = {}
        for t in self.tasks:
            p, r, f = self.headline(t)
            per_task[t] = {
                "precision": p, "recall": r, "f1": f,
                "mean": {k: self.mean(t, k) for k in METRIC_KEYS},
                "std": {k: self.std(t, k) for k in METRIC_KEYS},
                "pooled": self.pooled[t].to_dict(),
                "folds": [None if f_[t] is None else f_[t].to_dict() for f_ in self.folds],
            }
        return {
            "technique": self.name,
            "averaging": self.averaging,
            "k": self.k,
            "seed": self.seed,
            "objective_mean_macro_f1": self.objective(),
            "tasks": per_task,
            "absent_folds": [{"fold": f, "task": t} for f, t in self.absent],
            "provenance": {"fold_plan": self.plan.to_dict(), **self.provenance},
        }


def cross_validate(spec, dataset: Dataset, k: int = 5, seed: int = 0, averaging: str = "macro",
                   plan: FoldPlan | None = None) -> CVReport:
    """k-fold CV; encoder and model are refit on each fold's training rows only."""
    if averaging not in AVERAGING_MODES:
        raise ValueError(f"averaging must be one of {AVERAGING_MODES}")
    if k < 2:
        raise ValueError("k must be >= 2")
    schema = dataset.schema
    for t in schema.tasks:
        n_lab = sum(y is not MISSING for y in dataset.labels(t.name))
        if n_lab < k:
            raise ValueError(f"task {t.name!r} has {n_lab} labeled rows, fewer than k={k}")
    plan = plan or kfold_split(len(dataset), k, seed)
    folds = []
    absent = []
    pooled = {t.name: ConfusionMatrix(t.name, np.zeros((t.n_classes,) * 2, dtype=np.int64))
              for t in schema.tasks}
    oof = {t: np.full(len(dataset), -1, dtype=np.int64) for t in schema.task_names}
    fold_seeds = []
    for f in range(plan.k):
        tr_idx, va_idx = plan.training(f), plan.validation(f)
        train_ds = dataset.subset(tr_idx)
        enc = fit_encoder(train_ds)
        tr = encode(enc, train_ds)
        va = encode(enc, dataset.subset(va_idx))
        s = fold_seed(seed, f)
        fold_seeds.append(s)
        pred = spec.fit(enc, tr, s).predict_indices(va.X)
        fm = {}
        for t in schema.tasks:
            m = va.y[t.name] >= 0
            if not m.any():
                fm[t.name] = None
                absent.append((f, t.name))
                continue
            cm = confusion(va.y[t.name][m], pred[t.name][m], t.n_classes, t.name)
            fm[t.name] = macro_metrics(cm)
            pooled[t.name] = pooled[t.name] + cm
            oof[t.name][va_idx] = pred[t.name]
        folds.append(fm)
    prov = {"fold_seeds": fold_seeds}
    if hasattr(spec, "describe"):
        prov["model"] = spec.describe()
    return CVReport(spec.name, plan.k, seed, averaging, schema.task_names, folds,
                    {t: macro_metrics(cm) for t, cm in pooled.items()}, absent, plan, oof, prov)


# ---------------------------------------------------------------- grid search

DEFAULT_GRID = {
    "depth": [3, 4, 5, 6, 7],
    "epochs": [250, 500, 750, 1000],
    "learning_rate": [0.1, 0.01, 0.001, 0.0001],
}


def expand_grid(grid: Mapping[str, Sequence]) -> list[dict[str, Any]]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid must be non-empty")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def apply_cell(base: Hyperparams, cell: Mapping[str, Any]) -> Hyperparams:
    changes = dict(cell)
    if "depth" in changes:
        changes["trunk_sizes"] = trunk_for_depth(int(changes.pop("depth")), base.trunk_sizes or DEFAULT_TRUNK)
    return base.replace(**changes)


@dataclass
class GridCell:
    order: int
    params: dict
    hyperparams: Hyperparams
    n_parameters: int
    report: CVReport | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.report is not None

    @property
    def score(self) -> float:
        return self.report.objective() if self.ok else float("nan")

    def to_dict(self) -> dict:
        d = {"order": self.order, "params": self.params, "n_parameters": self.n_parameters,
             "status": "ok" if self.ok else "failed"}
        if self.ok:
            d["objective_mean_macro_f1"] = self.score
            d["accuracy"] = {t: self.report.accuracy(t) for t in self.report.tasks}
            d["macro_f1"] = {t: self.report.macro_f1(t) for t in self.report.tasks}
        else:
            d["error"] = self.error
        return d


@dataclass
class GridResult:
    cells: list[GridCell]  # ranked; failed cells last in grid order

    @property
    def best(self) -> GridCell:
        ok = [c for c in self.cells if c.ok]
        if not ok:
            raise RuntimeError("every grid cell failed")
        return ok[0]

    @property
    def best_hyperparams(self) -> Hyperparams:
        return self.best.hyperparams

    @property
    def failed(self) -> list[GridCell]:
        return [c for c in self.cells if not c.ok]

    def to_dict(self) -> dict:
        return {"objective": "mean over tasks of macro-F1",
                "best": self.best.to_dict() if any(c.ok for c in self.cells) else None,
                "cells": [c.to_dict() for c in self.cells]}


def grid_search(param_grid: Mapping[str, Sequence], dataset: Dataset, k: int = 5, seed: int = 0,
                base: Hyperparams | None = None,
                spec_factory: Callable[[Hyperparams], Any] | None = None) -> GridResult:
    """Exhaustive search scored by mean macro-F1; ties go to fewer parameters, then grid order.

    A cell whose training diverges is kept in the result as failed.
    """
    base = base or Hyperparams()
    spec_factory = spec_factory or MtlSpec
    probe = fit_encoder(dataset)
    cells = []
    for order, params in enumerate(expand_grid(param_grid)):
        hp = apply_cell(base, params)
        spec = spec_factory(hp)
        n_par = spec.n_parameters(dataset.schema, probe.dim) if hasattr(spec, "n_parameters") else 0
        cell = GridCell(order, dict(params), hp, n_par)
        try:
            cell.report = cross_validate(spec, dataset, k, seed)
        except DivergenceError as exc:
            cell.error = f"DivergenceError: {exc}"
        cells.append(cell)
    ok = sorted((c for c in cells if c.ok), key=lambda c: (-c.score, c.n_parameters, c.order))
    return GridResult(ok + [c for c in cells if not c.ok])


# --------------------------------------------------------------------- slices

@dataclass
class SliceReport:
    feature: str
    tasks: tuple[str, ...]
    categories: list[str]
    support: dict[str, dict[str, int]]
    accuracy: dict[str, dict[str, float | None]]
    overall: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "overall_accuracy": self.overall,
            "categories": [
                {"category": c, "support": self.support[c], "accuracy": self.accuracy[c]}
                for c in self.categories
            ],
        }

    def max_deviation(self, task: str) -> float:
        devs = [abs(a[task] - self.overall[task]) for a in self.accuracy.values() if a[task] is not None]
        return max(devs) if devs else 0.0


def slice_from_predictions(dataset: Dataset, feature: str, pred: Mapping[str, np.ndarray]) -> SliceReport:
    """Per-category accuracy from precomputed class-index predictions."""
    spec = dataset.schema.feature(feature)
    if spec.is_numeric:
        raise ValueError("slice requires categorical feature")
    col = dataset.column(feature)
    seen = sorted({v for v in col if v is not MISSING})
    cats = list(spec.categories or ()) + [c for c in seen if c not in (spec.categories or ())]
    truth = {}
    for t in dataset.schema.tasks:
        truth[t.name] = np.array([-1 if y is MISSING else t.scale._index[y]
                                  for y in dataset.labels(t.name)], dtype=np.int64)
    support, acc, overall = {}, {}, {}
    colarr = np.asarray([("\x00" if v is MISSING else v) for v in col], dtype=object)
    for t in dataset.schema.task_names:
        lab = truth[t] >= 0
        overall[t] = float(np.mean(pred[t][lab] == truth[t][lab])) if lab.any() else float("nan")
    for c in cats:
        in_c = colarr == c
        support[c] = {}
        acc[c] = {}
        for t in dataset.schema.task_names:
            m = in_c & (truth[t] >= 0)
            support[c][t] = int(m.sum())
            acc[c][t] = float(np.mean(pred[t][m] == truth[t][m])) if m.any() else None
    return SliceReport(feature, dataset.schema.task_names, cats, support, acc, overall)


def slice_report(model, dataset: Dataset, feature: str) -> SliceReport:
    """Per-category accuracy of a fitted model (anything with ``encoder`` and ``predict_indices``)."""
    if dataset.schema.feature(feature).is_numeric:
        raise ValueError("slice requires categorical feature")
    X = model.encoder.encode_matrix(dataset.records)
    return slice_from_predictions(dataset, feature, model.predict_indices(X))


DEFAULT_SLICE_AXES = ("school", "gender", "grade", "survey_day", "time_slot")


# ------------------------------------------------------------------- ablation

@dataclass
class AblationReport:
    baseline: CVReport
    reports: dict[str, CVReport]

    def delta(self, feature: str, task: str, key: str = "accuracy") -> float:
        return self.reports[feature].mean(task, key) - self.baseline.mean(task, key)

    def to_dict(self) -> dict:
        tasks = self.baseline.tasks
        return {
            "baseline": {t: {"accuracy": self.baseline.accuracy(t), "macro_f1": self.baseline.macro_f1(t),
                             "accuracy_fold_std": self.baseline.std(t, "accuracy")} for t in tasks},
            "features": [
                {"feature": f,
                 "delta_accuracy": {t: self.delta(f, t) for t in tasks},
                 "delta_macro_f1": {t: self.delta(f, t, "macro_f1") for t in tasks},
                 "accuracy_fold_std": {t: r.std(t, "accuracy") for t in tasks}}
                for f, r in self.reports.items()
            ],
        }


def feature_ablation(spec, dataset: Dataset, features: Sequence[str], k: int = 5, seed: int = 0) -> AblationReport:
    """Re-run CV once per feature with that feature removed from the encoding."""
    features = list(dict.fromkeys(features))
    if not features:
        raise ValueError("no features to ablate")
    for f in features:
        dataset.schema.feature(f)
    base = cross_validate(spec, dataset, k, seed)
    reports = {}
    for f in features:
        reduced = dataset.with_schema(dataset.schema.without_features([f]))
        reports[f] = cross_validate(spec, reduced, k, seed)
    return AblationReport(base, reports)


# -------------------------------------------------------------------- summary

def ecdf(values: Iterable[float]) -> list[tuple[float, float]]:
    vals = sorted(values)
    n = len(vals)
    out = []
    for i, v in enumerate(vals):
        if i + 1 < n and vals[i + 1] == v:
            continue
        out.append((v, (i + 1) / n))
    return out


def _numeric_stats(vals: list[float]) -> dict:
    if not vals:
        return {"count": 0}
    arr = np.asarray(vals, dtype=float)
    var = float(arr.var(ddof=1)) if len(arr) > 1 else 0.0
    return {
        "count": len(arr),
        "min": float(arr.min()),
        "max": float(arr.max()),
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "std": math.sqrt(var),
        "variance": var,
    }


def dataset_summary(dataset: Dataset, by: str | None = None) -> dict:
    """Descriptive statistics per feature and empirical vote distributions per task.

    Variance and standard deviation use the sample (n-1) convention. With
    ``by`` naming a categorical feature, numeric means are also reported per
    category of ``by``.
    """
    schema = dataset.schema
    out: dict[str, Any] = {"n": len(dataset), "features": {}, "tasks": {}}
    for f in schema.features:
        col = dataset.column(f.name)
        present = [v for v in col if v is not MISSING]
        if f.is_numeric:
            entry = _numeric_stats(present)
        else:
            counts = {c: 0 for c in (f.categories or ())}
            for v in present:
                counts[v] = counts.get(v, 0) + 1
            entry = {"count": len(present), "counts": counts}
        entry["missing"] = len(col) - len(present)
        out["features"][f.name] = entry
    for t in schema.tasks:
        labs = [y for y in dataset.labels(t.name) if y is not MISSING]
        n = len(labs)
        counts = {v: labs.count(v) for v in t.scale.values}
        out["tasks"][t.name] = {
            "count": n,
            "missing": len(dataset) - n,
            "counts": {str(v): c for v, c in counts.items()},
            "frequencies": {str(v): (c / n if n else 0.0) for v, c in counts.items()},
            "ecdf": [[v, p] for v, p in ecdf(labs)],
        }
    if by is not None:
        if schema.feature(by).is_numeric:
            raise ValueError("group-by requires a categorical feature")
        out["group_means"] = {by: group_means(dataset, by)}
    return out


def group_means(dataset: Dataset, by: str) -> dict[str, dict[str, float]]:
    keys = dataset.column(by)
    out: dict[str, dict[str, float]] = {}
    for f in dataset.schema.features:
        if not f.is_numeric:
            continue
        groups: dict[str, list[float]] = {}
        for k, v in zip(keys, dataset.column(f.name)):
            if k is MISSING or v is MISSING:
                continue
            groups.setdefault(k, []).append(v)
        out[f.name] = {k: statistics.fmean(v) for k, v in sorted(groups.items())}
    return out


# ------------------------------------------------------------------ rendering

def render_table(reports: Sequence[CVReport]) -> str:
    """Technique x task table of precision / recall / F1 in percent."""
    if not reports:
        return ""
    tasks = reports[0].tasks
    averaging = reports[0].averaging
    name_w = max(12, *(len(r.name) for r in reports))
    head1 = " " * name_w + " | " + " | ".join(f"{t:^26}" for t in tasks)
    head2 = f"{'Technique':<{name_w}} | " + " | ".join(f"{'Precision':>9} {'Recall':>7} {'F1':>8}" for _ in tasks)
    lines = [f"averaging: {averaging}; k={reports[0].k}; seed={reports[0].seed}", head1, head2,
             "-" * len(head2)]
    for r in reports:
        cells = []
        for t in tasks:
            p, rc, f = r.headline(t)
            cells.append(f"{100 * p:9.1f} {100 * rc:7.1f} {100 * f:8.1f}")
        lines.append(f"{r.name:<{name_w}} | " + " | ".join(cells))
    return "\n".join(lines) + "\n"


def reports_to_json(reports: Sequence[CVReport]) -> str:
    return json.dumps({"reports": [r.to_dict() for r in reports]}, indent=1, sort_keys=True)
