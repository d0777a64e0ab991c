"""Comfort scales, feature schema and the record/dataset containers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

MISSING = None


class SchemaError(ValueError):
    """Raised when a schema or record container is malformed."""


class UnknownClassError(KeyError):
    """Raised when a class value or index does not belong to a scale."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown class"


@dataclass(frozen=True)
class ComfortScale:
    """Ordered set of vote values for one task."""

    task_name: str
    classes: tuple[tuple[int, str], ...]

    def __post_init__(self):
        classes = tuple((int(v), str(label)) for v, label in self.classes)
        object.__setattr__(self, "classes", classes)
        if len(classes) < 2:
            raise SchemaError(f"scale {self.task_name!r} needs at least 2 classes")
        values = [v for v, _ in classes]
        if any(b <= a for a, b in zip(values, values[1:])):
            raise SchemaError(f"scale {self.task_name!r} values must be strictly increasing")
        object.__setattr__(self, "_index", {v: i for i, v in enumerate(values)})

    @property
    def values(self) -> tuple[int, ...]:
        return tuple(v for v, _ in self.classes)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(label for _, label in self.classes)

    def __len__(self) -> int:
        return len(self.classes)

    def __contains__(self, value) -> bool:
        return value in self._index

    def label_of(self, value: int) -> str:
        return self.classes[class_index(self, value)][1]


def class_index(scale: ComfortScale, value: int) -> int:
    """Position of ``value`` in the ascending class order of ``scale``."""
    try:
        return scale._index[value]
    except (KeyError, TypeError):
        raise UnknownClassError(f"unknown class {value!r} for scale {scale.task_name!r}") from None


def index_class(scale: ComfortScale, index: int) -> int:
    """Inverse of :func:`class_index`."""
    index = int(index)
    if not 0 <= index < len(scale.classes):
        raise UnknownClassError(f"unknown class index {index} for scale {scale.task_name!r}")
    return scale.classes[index][0]


@dataclass(frozen=True)
class TaskSpec:
    scale: ComfortScale
    loss_weight: float = 1.0

    def __post_init__(self):
        w = float(self.loss_weight)
        if not math.isfinite(w) or w < 0:
            raise SchemaError(f"loss weight for {self.name!r} must be finite and >= 0")
        object.__setattr__(self, "loss_weight", w)

    @property
    def name(self) -> str:
        return self.scale.task_name

    @property
    def n_classes(self) -> int:
        return len(self.scale)


@dataclass(frozen=True)
class FeatureSpec:
    """One input column.

    ``kind`` is ``"numeric"`` or ``"categorical"``. Numeric features carry a
    ``unit``; categorical ones carry the allowed ``categories`` (``None``
    means an open set, learned from training data).
    """

    name: str
    kind: str
    unit: str | None = None
    categories: tuple[str, ...] | None = None
    required: bool = False

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.categories is not None:
            cats = tuple(str(c) for c in self.categories)
            if len(set(cats)) != len(cats):
                raise SchemaError(f"feature {self.name!r}: duplicate categories")
            object.__setattr__(self, "categories", cats)
        if self.kind == "numeric" and self.categories is not None:
            raise SchemaError(f"numeric feature {self.name!r} cannot list categories")

    @property
    def is_numeric(self) -> bool:
        return self.kind == "numeric"


@dataclass(frozen=True)
class DatasetSchema:
    features: tuple[FeatureSpec, ...]
    tasks: tuple[TaskSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        fnames = [f.name for f in self.features]
        tnames = [t.name for t in self.tasks]
        if len(set(fnames)) != len(fnames):
            raise SchemaError("feature names must be unique")
        if len(set(tnames)) != len(tnames):
            raise SchemaError("task names must be unique")
        if set(fnames) & set(tnames):
            raise SchemaError("feature and task names must be disjoint")
        if self.tasks and not any(t.loss_weight > 0 for t in self.tasks):
            raise SchemaError("at least one task needs a positive loss weight")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    @property
    def task_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tasks)

    def feature(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(f"unknown feature {name!r}")

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(f"unknown task {name!r}")

    def without_features(self, names: Iterable[str]) -> "DatasetSchema":
        drop = set(names)
        unknown = drop - set(self.feature_names)
        if unknown:
            raise KeyError(f"unknown features {sorted(unknown)}")
        kept = tuple(f for f in self.features if f.name not in drop)
        if not kept:
            raise SchemaError("cannot drop every feature")
        return DatasetSchema(kept, self.tasks)

    def with_tasks(self, tasks: Sequence[TaskSpec]) -> "DatasetSchema":
        return DatasetSchema(self.features, tuple(tasks))

    def with_loss_weights(self, weights: Mapping[str, float] | Sequence[float]) -> "DatasetSchema":
        if not isinstance(weights, Mapping):
            weights = dict(zip(self.task_names, weights))
        tasks = tuple(TaskSpec(t.scale, weights.get(t.name, t.loss_weight)) for t in self.tasks)
        return DatasetSchema(self.features, tasks)

    # serialization

    def to_dict(self) -> dict[str, Any]:
        feats = []
        for f in self.features:
            entry: dict[str, Any] = {"name": f.name, "kind": f.kind}
            if f.is_numeric:
                entry["unit"] = f.unit
            else:
                entry["categories"] = None if f.categories is None else list(f.categories)
            entry["required"] = f.required
            feats.append(entry)
        tasks = [
            {
                "name": t.name,
                "classes": [{"value": v, "label": label} for v, label in t.scale.classes],
                "loss_weight": t.loss_weight,
            }
            for t in self.tasks
        ]
        return {"features": feats, "tasks": tasks}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "DatasetSchema":
        try:
            feats = tuple(
                FeatureSpec(
                    name=str(f["name"]),
                    kind=str(f["kind"]),
                    unit=f.get("unit"),
                    categories=None if f.get("categories") is None else tuple(f["categories"]),
                    required=bool(f.get("required", False)),
                )
                for f in doc["features"]
            )
            tasks = tuple(
                TaskSpec(
                    ComfortScale(str(t["name"]), tuple((c["value"], c["label"]) for c in t["classes"])),
                    float(t.get("loss_weight", 1.0)),
                )
                for t in doc["tasks"]
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema document: {exc}") from None
        return cls(feats, tasks)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "DatasetSchema":
        return cls.from_dict(json.loads(text))


def load_schema(path) -> DatasetSchema:
    with open(path, encoding="utf-8") as fh:
        return DatasetSchema.from_json(fh.read())


@dataclass(frozen=True)
class SurveyRecord:
    """One questionnaire row. Missing entries are ``None``."""

    values: Mapping[str, Any] = field(default_factory=dict)
    labels: Mapping[str, int | None] = field(default_factory=dict)

    def value(self, name: str):
        return self.values.get(name, MISSING)

    def label(self, name: str):
        return self.labels.get(name, MISSING)


@dataclass(frozen=True)
class Violation:
    field: str
    kind: str
    message: str

    def __str__(self) -> str:
        return self.message


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def validate_record(schema: DatasetSchema, record: SurveyRecord) -> list[Violation]:
    """Every way ``record`` disagrees with ``schema``; empty means valid."""
    out: list[Violation] = []
    known = set(schema.feature_names)
    for name in record.values:
        if name not in known:
            out.append(Violation(name, "unknown feature", f"unknown feature {name!r}"))
    for f in schema.features:
        v = record.value(f.name)
        if v is MISSING:
            if f.required:
                out.append(Violation(f.name, "missing required feature",
                                     f"missing required feature {f.name!r}"))
            continue
        if f.is_numeric:
            if not _is_number(v):
                out.append(Violation(f.name, "wrong kind", f"feature {f.name!r} expects a finite number, got {v!r}"))
        else:
            if not isinstance(v, str):
                out.append(Violation(f.name, "wrong kind", f"feature {f.name!r} expects a category, got {v!r}"))
            elif f.categories is not None and v not in f.categories:
                out.append(Violation(f.name, "unknown category", f"unknown category {v!r} for feature {f.name!r}"))
    task_names = set(schema.task_names)
    for name in record.labels:
        if name not in task_names:
            out.append(Violation(name, "unknown task", f"unknown task {name!r}"))
    for t in schema.tasks:
        y = record.label(t.name)
        if y is not MISSING and y not in t.scale:
            out.append(Violation(t.name, "label outside scale",
                                 f"label {y!r} outside scale for task {t.name!r}"))
    return out


@dataclass(frozen=True)
class Dataset:
    schema: DatasetSchema
    records: tuple[SurveyRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list:
        return [r.value(name) for r in self.records]

    def labels(self, task: str) -> list:
        return [r.label(task) for r in self.records]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(self.schema, tuple(self.records[i] for i in indices))

    def with_schema(self, schema: DatasetSchema) -> "Dataset":
        return Dataset(schema, self.records)

    def violations(self) -> dict[int, list[Violation]]:
        out = {}
        for i, rec in enumerate(self.records):
            v = validate_record(self.schema, rec)
            if v:
                out[i] = v
        return out


TSV_SCALE = ComfortScale("TSV", (
    (-3, "Cold"), (-2, "Cool"), (-1, "Slightly Cool"), (0, "Neutral"),
    (1, "Slightly Warm"), (2, "Warm"), (3, "Hot"),
))
TPV_SCALE = ComfortScale("TPV", (
    (-2, "Much Cooler"), (-1, "Bit Cooler"), (0, "No Change"), (1, "Bit Warmer"), (2, "Much Warmer"),
))
TCV_SCALE = ComfortScale("TCV", (
    (-3, "Very Uncomfortable"), (-2, "Uncomfortable"), (-1, "Slightly Uncomfortable"),
    (1, "Slightly Comfortable"), (2, "Comfortable"), (3, "Very Comfortable"),
))

GENDERS = ("M", "F")
GRADES = ("3", "4", "5")
SCHOOLS = ("S1", "S2", "S3", "S4", "S5")
TIME_SLOTS = ("1", "2", "3", "4", "5", "6")
SURVEY_DAYS = ("1", "2", "3", "4", "5")


def default_schema() -> DatasetSchema:
    """Classroom survey schema: 8 numeric, 5 categorical features, TSV/TPV/TCV."""
    num = [
        ("indoor_temp", "degC", True),
        ("relative_humidity", "%", True),
        ("air_speed", "m/s", False),
        ("outdoor_temp", "degC", True),
        ("daily_max_temp", "degC", False),
        ("daily_min_temp", "degC", False),
        ("daily_avg_temp", "degC", False),
        ("clo", "clo", False),
    ]
    cat = [
        ("gender", GENDERS),
        ("grade", GRADES),
        ("school", SCHOOLS),
        ("time_slot", TIME_SLOTS),
        ("survey_day", SURVEY_DAYS),
    ]
    features = [FeatureSpec(n, "numeric", unit=u, required=r) for n, u, r in num]
    features += [FeatureSpec(n, "categorical", categories=c) for n, c in cat]
    tasks = [TaskSpec(TSV_SCALE), TaskSpec(TPV_SCALE), TaskSpec(TCV_SCALE)]
    return DatasetSchema(tuple(features), tuple(tasks))
