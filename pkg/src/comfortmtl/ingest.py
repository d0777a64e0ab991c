"""CSV ingestion, imputation, feature encoding, fold plans and synthetic data."""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import statistics
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Mapping, Sequence

import numpy as np

from .schema import (
    MISSING,
    Dataset,
    DatasetSchema,
    SchemaError,
    SurveyRecord,
    class_index,
    default_schema,
)

NA_TOKENS = ("", "NA")


class DataError(ValueError):
    """Row-level problem in an input file; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class ImputeError(ValueError):
    pass


class NotFittedError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- CSV

def _parse_row(schema: DatasetSchema, row: Mapping[str, str], line: int) -> SurveyRecord:
    values: dict[str, Any] = {}
    for f in schema.features:
        if f.name not in row:
            continue
        cell = (row[f.name] or "").strip()
        if cell in NA_TOKENS:
            values[f.name] = MISSING
        elif f.is_numeric:
            try:
                x = float(cell)
            except ValueError:
                raise DataError(f"cannot parse {cell!r} as a number in column {f.name!r}", line) from None
            if not math.isfinite(x):
                raise DataError(f"non-finite value in column {f.name!r}", line)
            values[f.name] = x
        else:
            values[f.name] = cell
    labels: dict[str, int | None] = {}
    for t in schema.tasks:
        if t.name not in row:
            continue
        cell = (row[t.name] or "").strip()
        if cell in NA_TOKENS:
            labels[t.name] = MISSING
            continue
        try:
            y = float(cell)
        except ValueError:
            raise DataError(f"label {cell!r} for {t.name} is not an integer", line) from None
        if not y.is_integer():
            raise DataError(f"label {cell!r} for {t.name} is not an integer", line)
        y = int(y)
        if y not in t.scale:
            raise DataError(f"label {y} outside scale for {t.name}", line)
        labels[t.name] = y
    return SurveyRecord(values, labels)


def read_csv(fh, schema: DatasetSchema) -> Dataset:
    reader = csv.DictReader(fh)
    header = reader.fieldnames
    if not header:
        raise SchemaError("CSV file has no header row")
    header = [h.strip() for h in header]
    reader.fieldnames = header
    for f in schema.features:
        if f.required and f.name not in header:
            raise SchemaError(f"missing required column {f.name!r}")
    records = [_parse_row(schema, row, line=i + 2) for i, row in enumerate(reader)]
    return Dataset(schema, tuple(records))


def load_csv(path, schema: DatasetSchema | None = None) -> Dataset:
    """Read a survey CSV. Empty cells and ``NA`` become missing."""
    schema = schema or default_schema()
    with open(path, newline="", encoding="utf-8") as fh:
        return read_csv(fh, schema)


def _fmt(v) -> str:
    if v is MISSING:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dataset_to_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(dataset.schema.feature_names)
    tasks = list(dataset.schema.task_names)
    w.writerow(names + tasks)
    for r in dataset.records:
        w.writerow([_fmt(r.value(n)) for n in names] + [_fmt(r.label(t)) for t in tasks])
    return buf.getvalue()


def write_csv(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dataset_to_csv(dataset))


# ------------------------------------------------------------------- imputation

def _mode(values: Sequence[str], order: Sequence[str] | None) -> str:
    counts: dict[str, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    if order is None:
        order = sorted(counts)
    else:
        order = list(order) + sorted(set(counts) - set(order))
    best = max(counts.values())
    return next(c for c in order if counts.get(c, 0) == best)


def fill_values(dataset: Dataset) -> dict[str, Any]:
    """Median for numeric columns, mode for categorical ones (ties by category order)."""
    fills: dict[str, Any] = {}
    for f in dataset.schema.features:
        present = [v for v in dataset.column(f.name) if v is not MISSING]
        if not present:
            raise ImputeError(f"cannot impute empty column {f.name!r}")
        if f.is_numeric:
            fills[f.name] = float(statistics.median(present))
        else:
            fills[f.name] = _mode(present, f.categories)
    return fills


def _fill_record(rec: SurveyRecord, fills: Mapping[str, Any]) -> SurveyRecord:
    if all(rec.value(n) is not MISSING for n in fills):
        return rec
    values = dict(rec.values)
    for n, v in fills.items():
        if values.get(n, MISSING) is MISSING:
            values[n] = v
    return SurveyRecord(values, rec.labels)


def impute(dataset: Dataset, fills: Mapping[str, Any] | None = None) -> Dataset:
    """Fill missing feature cells. Labels are never imputed."""
    fills = fill_values(dataset) if fills is None else fills
    return Dataset(dataset.schema, tuple(_fill_record(r, fills) for r in dataset.records))


# --------------------------------------------------------------------- encoding

@dataclass(frozen=True)
class EncodedDataset:
    """Numeric design matrix plus per-task label indices (-1 where absent)."""

    X: np.ndarray
    y: dict[str, np.ndarray]
    schema: DatasetSchema

    def __len__(self) -> int:
        return self.X.shape[0]

    def mask(self, task: str) -> np.ndarray:
        return self.y[task] >= 0

    def subset(self, idx) -> "EncodedDataset":
        idx = np.asarray(idx)
        return EncodedDataset(self.X[idx], {t: v[idx] for t, v in self.y.items()}, self.schema)


@dataclass
class Encoder:
    """Standardization for numeric features, one-hot (+OTHER) for categorical ones."""

    schema: DatasetSchema
    means: dict[str, float] = field(default_factory=dict)
    stds: dict[str, float] = field(default_factory=dict)
    categories: dict[str, tuple[str, ...]] = field(default_factory=dict)
    fills: dict[str, Any] = field(default_factory=dict)
    fitted: bool = False

    @property
    def dim(self) -> int:
        n = 0
        for f in self.schema.features:
            n += 1 if f.is_numeric else len(self.categories[f.name]) + 1
        return n

    def column_names(self) -> list[str]:
        names = []
        for f in self.schema.features:
            if f.is_numeric:
                names.append(f.name)
            else:
                names += [f"{f.name}={c}" for c in self.categories[f.name]]
                names.append(f"{f.name}=OTHER")
        return names

    def encode_matrix(self, records: Sequence[SurveyRecord]) -> np.ndarray:
        if not self.fitted:
            raise NotFittedError("encoder not fitted")
        X = np.zeros((len(records), self.dim))
        col = 0
        for f in self.schema.features:
            fill = self.fills[f.name]
            vals = [r.value(f.name) for r in records]
            vals = [fill if v is MISSING else v for v in vals]
            if f.is_numeric:
                sd = self.stds[f.name]
                if sd > 0:
                    X[:, col] = (np.asarray(vals, dtype=float) - self.means[f.name]) / sd
                col += 1
            else:
                cats = self.categories[f.name]
                pos = {c: i for i, c in enumerate(cats)}
                other = len(cats)
                for i, v in enumerate(vals):
                    X[i, col + pos.get(v, other)] = 1.0
                col += other + 1
        return X

    def to_dict(self) -> dict[str, Any]:
        return {
            "means": dict(self.means),
            "stds": dict(self.stds),
            "categories": {k: list(v) for k, v in self.categories.items()},
            "fills": dict(self.fills),
        }

    @classmethod
    def from_dict(cls, schema: DatasetSchema, doc: Mapping[str, Any]) -> "Encoder":
        enc = cls(
            schema,
            means={k: float(v) for k, v in doc["means"].items()},
            stds={k: float(v) for k, v in doc["stds"].items()},
            categories={k: tuple(v) for k, v in doc["categories"].items()},
            fills=dict(doc["fills"]),
            fitted=True,
        )
        for f in schema.features:
            store = enc.means if f.is_numeric else enc.categories
            if f.name not in store or f.name not in enc.fills:
                raise SchemaError(f"encoder statistics missing for feature {f.name!r}")
        return enc


def fit_encoder(train: Dataset) -> Encoder:
    """Fit encoding statistics on training rows only."""
    schema = train.schema
    enc = Encoder(schema)
    enc.fills = fill_values(train)
    for f in schema.features:
        col = [enc.fills[f.name] if v is MISSING else v for v in train.column(f.name)]
        if f.is_numeric:
            arr = np.asarray(col, dtype=float)
            enc.means[f.name] = float(arr.mean())
            with np.errstate(over="ignore", invalid="ignore"):
                mean, std = float(arr.mean()), float(arr.std())
            if not (math.isfinite(mean) and math.isfinite(std)):
                raise DataError(f"column {f.name!r}: mean or spread overflows float64")
            enc.means[f.name] = mean
            enc.stds[f.name] = std
        elif f.categories is not None:
            enc.categories[f.name] = tuple(f.categories)
        else:
            enc.categories[f.name] = tuple(sorted(set(col)))
    enc.fitted = True
    return enc


def encode_labels(dataset: Dataset) -> dict[str, np.ndarray]:
    out = {}
    for t in dataset.schema.tasks:
        out[t.name] = np.array(
            [-1 if y is MISSING else class_index(t.scale, y) for y in dataset.labels(t.name)],
            dtype=np.int64,
        )
    return out


def encode(encoder: Encoder, dataset: Dataset) -> EncodedDataset:
    X = encoder.encode_matrix(dataset.records)
    return EncodedDataset(X, encode_labels(dataset), dataset.schema)


# ------------------------------------------------------------------------ folds

@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: np.ndarray
    seed: int

    def validation(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def training(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.k).tolist()

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignment": self.assignment.tolist()}


def kfold_split(n: int, k: int, seed: int) -> FoldPlan:
    """Shuffle ``range(n)`` with ``seed`` and cut it into ``k`` contiguous folds."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > n:
        raise ValueError("more folds than samples")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    for fold, chunk in enumerate(np.array_split(perm, k)):
        assignment[chunk] = fold
    return FoldPlan(k, assignment, seed)


# -------------------------------------------------------------------- synthetic

TRANSFORMS = {
    "identity": lambda z: z,
    "negate": lambda z: -z,
    "neg_abs": lambda z: -np.abs(z),
}


def default_synthetic_spec() -> dict:
    text = resources.files("comfortmtl").joinpath("data/synthetic_default.json").read_text("utf-8")
    return json.loads(text)


def load_synthetic_spec(path=None) -> dict:
    if path is None:
        return default_synthetic_spec()
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _check_spec(spec: Mapping, schema: DatasetSchema) -> None:
    frac = spec.get("illogical_fraction", 0.0)
    if not 0.0 <= frac <= 1.0:
        raise ConfigError("illogical_fraction must lie in [0, 1]")
    if spec["latent"].get("noise_std", 0.0) < 0:
        raise ConfigError("latent noise_std must be >= 0")
    for name, d in spec["features"].items():
        if d.get("std", 0.0) < 0:
            raise ConfigError(f"negative deviation for feature {name!r}")
        if d["dist"] == "uniform" and d["high"] < d["low"]:
            raise ConfigError(f"uniform bounds reversed for feature {name!r}")
    for t in schema.tasks:
        tspec = spec["tasks"].get(t.name)
        if tspec is None:
            raise ConfigError(f"no latent map for task {t.name!r}")
        if tspec.get("noise_std", 0.0) < 0:
            raise ConfigError(f"task {t.name!r} noise_std must be >= 0")
        if tspec["transform"] not in TRANSFORMS:
            raise ConfigError(f"unknown transform {tspec['transform']!r}")
        cuts = tspec["cuts"]
        if len(cuts) != len(t.scale) - 1 or any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ConfigError(f"task {t.name!r} needs {len(t.scale) - 1} increasing cuts")


def latent_score(values: Mapping[str, np.ndarray], latent: Mapping) -> np.ndarray:
    """Noise-free comfort score: intercept + sum of coef * (x - center)."""
    n = len(next(iter(values.values())))
    z = np.full(n, float(latent.get("intercept", 0.0)))
    centers = latent.get("centers", {})
    for name, coef in latent["coefficients"].items():
        z = z + coef * (np.asarray(values[name], dtype=float) - centers.get(name, 0.0))
    return z


def latent_labels(z: np.ndarray, task_spec: Mapping, scale) -> np.ndarray:
    """Map latent scores to class values of ``scale`` through binned cuts."""
    u = TRANSFORMS[task_spec["transform"]](z) * task_spec.get("scale", 1.0)
    idx = np.searchsorted(np.asarray(task_spec["cuts"], dtype=float), u, side="right")
    return np.asarray(scale.values)[idx]


def _draw(rng, d: Mapping, n: int) -> np.ndarray:
    if d["dist"] == "normal":
        x = rng.normal(d["mean"], d["std"], n)
    elif d["dist"] == "uniform":
        x = rng.uniform(d["low"], d["high"], n)
    else:
        raise ConfigError(f"unknown distribution {d['dist']!r}")
    return x


def generate_synthetic(n: int, seed: int, spec: Mapping | None = None,
                       schema: DatasetSchema | None = None) -> Dataset:
    """Seeded synthetic survey data with correlated TSV/TPV/TCV labels.

    Features are drawn as described by ``spec``; a latent score ``z`` (linear in the
    features plus Gaussian noise) is binned into TSV (increasing in ``z``),
    TPV (decreasing) and TCV (decreasing in ``|z|``). A task entry may carry
    its own ``noise_std``: that task then reads ``z`` plus independent
    response noise, so the three votes share a signal without being exact
    functions of one another. A fraction of rows then get their
    ``illogical_task`` label resampled uniformly.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    schema = schema or default_schema()
    spec = copy.deepcopy(spec) if spec is not None else default_synthetic_spec()
    _check_spec(spec, schema)
    rng = np.random.default_rng(seed)

    cols: dict[str, Any] = {}
    for f in schema.features:
        if f.is_numeric:
            continue
        d = spec["features"].get(f.name, {"dist": "categorical"})
        cats = list(d.get("categories") or f.categories or ())
        if not cats:
            raise ConfigError(f"no categories to draw for {f.name!r}")
        p = d.get("probs")
        cols[f.name] = np.asarray(cats, dtype=object)[rng.choice(len(cats), size=n, p=p)]
    for f in schema.features:
        if not f.is_numeric:
            continue
        d = spec["features"][f.name]
        x = _draw(rng, d, n)
        group = d.get("group_means")
        if group:
            keys = cols[group["feature"]]
            shift = np.array([group["means"].get(k, d["mean"]) for k in keys]) - d["mean"]
            x = x + shift
        if "low" in d or "high" in d:
            x = np.clip(x, d.get("low", -np.inf), d.get("high", np.inf))
        if "decimals" in d:
            x = np.round(x, d["decimals"])
        cols[f.name] = x

    latent = spec["latent"]
    z = latent_score(cols, latent) + rng.normal(0.0, latent.get("noise_std", 0.0), n)
    labels = {}
    for t in schema.tasks:
        tspec = spec["tasks"][t.name]
        zt = z
        if tspec.get("noise_std", 0.0) > 0:
            zt = z + rng.normal(0.0, tspec["noise_std"], n)
        labels[t.name] = latent_labels(zt, tspec, t.scale)

    frac = spec.get("illogical_fraction", 0.0)
    noisy_task = spec.get("illogical_task", "TCV")
    flip = rng.random(n) < frac
    if noisy_task in labels:
        vals = np.asarray(schema.task(noisy_task).scale.values)
        resampled = vals[rng.integers(0, len(vals), n)]
        labels[noisy_task] = np.where(flip, resampled, labels[noisy_task])

    records = []
    for i in range(n):
        values = {}
        for f in schema.features:
            v = cols[f.name][i]
            values[f.name] = float(v) if f.is_numeric else str(v)
        records.append(SurveyRecord(values, {t: int(labels[t][i]) for t in labels}))
    return Dataset(schema, tuple(records))
