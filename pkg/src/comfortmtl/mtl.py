"""Hard-parameter-sharing network: shared tanh trunk, one softmax head per task."""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .ingest import EncodedDataset, Encoder, NotFittedError
from .nn import (
    DenseLayer,
    DivergenceError,
    cross_entropy_batch,
    dense_backward,
    dropout_mask,
    make_optimizer,
    softmax,
    softmax_ce_grad,
)
from .schema import (
    MISSING,
    DatasetSchema,
    SchemaError,
    SurveyRecord,
    index_class,
    validate_record,
)

FORMAT_VERSION = 1
DEFAULT_TRUNK = (20, 50, 80, 100, 120)

# stream tags for derived generators
_TRUNK_INIT, _HEAD_INIT, _TRUNK_DROP, _HEAD_DROP, _SHUFFLE = 1, 2, 3, 4, 5


class ModelFileError(ValueError):
    """Model file is truncated, tampered with, inconsistent or from another format version."""


class PredictError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


def derived_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) % 2**64, *tags])


def task_tag(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


@dataclass(frozen=True)
class Hyperparams:
    trunk_sizes: tuple[int, ...] = DEFAULT_TRUNK
    head_hidden_sizes: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    dropout_rate: float = 0.2
    learning_rate: float = 0.001
    epochs: int = 750
    batch_size: int = 32
    loss_weights: Mapping[str, float] | None = None
    class_weights: Mapping[str, Sequence[float]] | None = None
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "trunk_sizes", tuple(int(s) for s in self.trunk_sizes))
        object.__setattr__(self, "head_hidden_sizes",
                           {k: tuple(int(s) for s in v) for k, v in dict(self.head_hidden_sizes).items()})
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if any(s < 1 for s in self.trunk_sizes):
            raise ValueError("every trunk size must be >= 1")
        if any(s < 1 for v in self.head_hidden_sizes.values() for s in v):
            raise ValueError("every head hidden size must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def replace(self, **changes) -> "Hyperparams":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["trunk_sizes"] = list(self.trunk_sizes)
        d["head_hidden_sizes"] = {k: list(v) for k, v in self.head_hidden_sizes.items()}
        d["loss_weights"] = None if self.loss_weights is None else dict(self.loss_weights)
        d["class_weights"] = (None if self.class_weights is None
                              else {k: list(v) for k, v in self.class_weights.items()})
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Hyperparams":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters {sorted(unknown)}")
        return cls(**dict(d))


def trunk_for_depth(depth: int, base: Sequence[int] = DEFAULT_TRUNK) -> tuple[int, ...]:
    """First ``depth`` default widths, repeating the last one beyond the default depth."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    base = tuple(base)
    return base[:depth] + (base[-1],) * max(0, depth - len(base))


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    task_loss: dict[str, list[float]] = field(default_factory=dict)
    val_accuracy: dict[str, list[float]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.loss)

    def to_csv(self) -> str:
        tasks = list(self.task_loss)
        vtasks = list(self.val_accuracy)
        cols = ["epoch", "loss"] + [f"loss_{t}" for t in tasks] + [f"val_acc_{t}" for t in vtasks]
        lines = [",".join(cols)]
        for e in range(len(self.loss)):
            row = [str(e + 1), repr(self.loss[e])]
            row += [repr(self.task_loss[t][e]) for t in tasks]
            row += [repr(self.val_accuracy[t][e]) for t in vtasks]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


class MtlNetwork:
    """Shared trunk of tanh+dropout layers feeding one softmax head per task."""

    def __init__(self, schema: DatasetSchema, encoder: Encoder, hyperparams: Hyperparams,
                 trunk: list[DenseLayer], heads: dict[str, list[DenseLayer]]):
        self.schema = schema
        self.encoder = encoder
        self.hyperparams = hyperparams
        self.trunk = trunk
        self.heads = heads

    # -- structure

    @property
    def task_names(self) -> tuple[str, ...]:
        return self.schema.task_names

    @property
    def input_dim(self) -> int:
        return self.trunk[0].n_in if self.trunk else next(iter(self.heads.values()))[0].n_in

    def loss_weights(self) -> dict[str, float]:
        w = {t.name: t.loss_weight for t in self.schema.tasks}
        if self.hyperparams.loss_weights is not None:
            w.update({k: float(v) for k, v in self.hyperparams.loss_weights.items()})
        return w

    def layers(self) -> list[DenseLayer]:
        out = list(self.trunk)
        for t in self.task_names:
            out += self.heads[t]
        return out

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers():
            out += [layer.W, layer.b]
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def trunk_parameters(self) -> list[np.ndarray]:
        return [p for layer in self.trunk for p in (layer.W, layer.b)]

    def head_parameters(self, task: str) -> list[np.ndarray]:
        return [p for layer in self.heads[task] for p in (layer.W, layer.b)]

    # -- forward / backward

    def _dropout_masks(self, batch: int, trunk_rng, head_rngs) -> dict:
        rate = self.hyperparams.dropout_rate
        masks = {"trunk": [dropout_mask((batch, l.n_out), rate, trunk_rng) for l in self.trunk]}
        for t in self.task_names:
            hidden = self.heads[t][:-1]
            masks[t] = [dropout_mask((batch, l.n_out), rate, head_rngs[t]) for l in hidden]
        return masks

    def _forward(self, X: np.ndarray, masks: dict | None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"shape mismatch: expected (*, {self.input_dim}), got {X.shape}")
        cache = {"trunk": []}
        h = X
        for i, layer in enumerate(self.trunk):
            t = np.tanh(h @ layer.W.T + layer.b)
            m = None if masks is None else masks["trunk"][i]
            cache["trunk"].append((h, t, m))
            h = t if m is None else t * m
        shared = h
        probs = {}
        for task in self.task_names:
            stack = self.heads[task]
            g = shared
            hc = []
            for j, layer in enumerate(stack[:-1]):
                t = np.tanh(g @ layer.W.T + layer.b)
                m = None if masks is None else masks[task][j]
                hc.append((g, t, m))
                g = t if m is None else t * m
            out = stack[-1]
            hc.append((g, None, None))
            probs[task] = softmax(g @ out.W.T + out.b)
            cache[task] = hc
        return probs, cache

    def forward(self, X, training: bool = False, rng: np.random.Generator | None = None):
        """Per-task class distributions for a batch ``(B, d)`` or a single vector ``(d,)``."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        masks = None
        if training and self.hyperparams.dropout_rate > 0:
            rng = rng if rng is not None else np.random.default_rng()
            masks = self._dropout_masks(X.shape[0], rng, {t: rng for t in self.task_names})
        probs, _ = self._forward(X, masks)
        if single:
            probs = {t: p[0] for t, p in probs.items()}
        return probs

    def _row_scale(self, task: str, y: np.ndarray, batch: int) -> np.ndarray:
        w = self.loss_weights()[task]
        scale = np.full(len(y), w / batch)
        cw = (self.hyperparams.class_weights or {}).get(task)
        if cw is not None:
            cw = np.asarray(cw, dtype=float)
            present = y >= 0
            scale[present] *= cw[y[present]]
        return scale

    def loss_and_grads(self, X, targets: Mapping[str, np.ndarray], need_grads: bool = True,
                       masks: dict | None = None):
        """Joint loss ``mean_i sum_t w_t CE_it`` and its gradients, aligned with ``parameters()``.

        Absent labels (index -1) contribute neither loss nor gradient.
        """
        X = np.asarray(X, dtype=float)
        B = X.shape[0]
        probs, cache = self._forward(X, masks)
        loss = 0.0
        task_losses = {}
        scales = {}
        for task in self.task_names:
            y = np.asarray(targets.get(task, np.full(B, -1)), dtype=np.int64)
            ce = cross_entropy_batch(probs[task], y)
            scale = self._row_scale(task, y, B)
            task_losses[task] = ce
            scales[task] = (y, scale)
            loss += float(np.dot(scale, ce))
        self._last_task_losses = task_losses
        if not need_grads:
            return loss, None

        grads_by_layer: dict[int, tuple] = {}
        layers = self.layers()
        layer_id = {id(l): i for i, l in enumerate(layers)}
        g_shared = None
        for task in self.task_names:
            y, scale = scales[task]
            stack = self.heads[task]
            if not np.any(scale[y >= 0] != 0):
                for layer in stack:
                    grads_by_layer[layer_id[id(layer)]] = (np.zeros_like(layer.W), np.zeros_like(layer.b))
                continue
            g = softmax_ce_grad(probs[task], y, scale)
            hc = cache[task]
            for j in range(len(stack) - 1, -1, -1):
                inp, t, m = hc[j]
                if t is not None:
                    if m is not None:
                        g = g * m
                    g = g * (1.0 - t * t)
                dW, db, g = dense_backward(stack[j], inp, g)
                grads_by_layer[layer_id[id(stack[j])]] = (dW, db)
            g_shared = g if g_shared is None else g_shared + g
        if g_shared is None:
            g_shared = np.zeros((B, self.trunk[-1].n_out if self.trunk else self.input_dim))
        g = g_shared
        for i in range(len(self.trunk) - 1, -1, -1):
            inp, t, m = cache["trunk"][i]
            if m is not None:
                g = g * m
            g = g * (1.0 - t * t)
            dW, db, g = dense_backward(self.trunk[i], inp, g)
            grads_by_layer[layer_id[id(self.trunk[i])]] = (dW, db)
        grads = []
        for i in range(len(layers)):
            grads += list(grads_by_layer[i])
        return loss, grads

    # -- inference

    def predict_proba(self, X) -> dict[str, np.ndarray]:
        return self.forward(np.atleast_2d(np.asarray(X, dtype=float)), training=False)

    def predict_indices(self, X) -> dict[str, np.ndarray]:
        """Argmax class index per task; ties go to the lower class value."""
        return {t: np.argmax(p, axis=1) for t, p in self.predict_proba(X).items()}

    def predict(self, X) -> dict[str, np.ndarray]:
        return predict_indices_to_values(self.schema, self.predict_indices(X))


def predict_indices_to_values(schema: DatasetSchema, idx: Mapping[str, np.ndarray]):
    out = {}
    for t in schema.tasks:
        vals = np.asarray(t.scale.values)
        out[t.name] = vals[idx[t.name]]
    return out


def init_network(schema: DatasetSchema, encoder: Encoder, hyperparams: Hyperparams | None = None) -> MtlNetwork:
    """Seeded Glorot-uniform initialization; one stream per layer so tasks don't shift each other."""
    hp = hyperparams or Hyperparams()
    if not encoder.fitted:
        raise NotFittedError("encoder not fitted")
    d = encoder.dim
    if d == 0:
        raise ValueError("empty schema: encoded input width is 0")
    if not schema.tasks:
        raise ValueError("schema has no tasks")
    unknown = set(hp.head_hidden_sizes) - set(schema.task_names)
    if unknown:
        raise ValueError(f"head sizes given for unknown tasks {sorted(unknown)}")
    trunk = []
    width = d
    for i, size in enumerate(hp.trunk_sizes):
        trunk.append(DenseLayer.glorot(width, size, derived_rng(hp.seed, _TRUNK_INIT, i)))
        width = size
    heads = {}
    for t in schema.tasks:
        sizes = tuple(hp.head_hidden_sizes.get(t.name, ())) + (t.n_classes,)
        stack = []
        w = width
        for j, size in enumerate(sizes):
            stack.append(DenseLayer.glorot(w, size, derived_rng(hp.seed, _HEAD_INIT, task_tag(t.name), j)))
            w = size
        heads[t.name] = stack
    return MtlNetwork(schema, encoder, hp, trunk, heads)


def joint_loss(net: MtlNetwork, x, labels: Mapping[str, int | None]):
    """Weighted sum of per-task cross-entropies for one sample.

    ``labels`` maps task name to class index or ``None``. Returns ``None`` when
    no label is present (the sample should be skipped).
    """
    y = {t: np.array([-1 if labels.get(t) is None else int(labels[t])]) for t in net.task_names}
    if all(v[0] < 0 for v in y.values()):
        return None
    loss, _ = net.loss_and_grads(np.atleast_2d(np.asarray(x, dtype=float)), y, need_grads=False)
    return loss


def _accuracy(net: MtlNetwork, data: EncodedDataset) -> dict[str, float]:
    pred = net.predict_indices(data.X)
    out = {}
    for t in net.task_names:
        m = data.y[t] >= 0
        out[t] = float(np.mean(pred[t][m] == data.y[t][m])) if m.any() else float("nan")
    return out


def train(net: MtlNetwork, train_set: EncodedDataset, validation: EncodedDataset | None = None,
          callback=None) -> TrainHistory:
    """Mini-batch training on the joint loss; deterministic for a fixed seed."""
    hp = net.hyperparams
    n = len(train_set)
    if n == 0:
        raise ValueError("empty training set")
    if train_set.X.shape[1] != net.input_dim:
        raise ValueError("training set was not encoded with this network's encoder")
    opt = make_optimizer(hp.optimizer, hp.learning_rate)
    shuffle_rng = derived_rng(hp.seed, _SHUFFLE)
    trunk_rng = derived_rng(hp.seed, _TRUNK_DROP)
    head_rngs = {t: derived_rng(hp.seed, _HEAD_DROP, task_tag(t)) for t in net.task_names}
    params = net.parameters()
    hist = TrainHistory(task_loss={t: [] for t in net.task_names},
                        val_accuracy={t: [] for t in net.task_names} if validation is not None else {})
    use_dropout = hp.dropout_rate > 0
    for epoch in range(1, hp.epochs + 1):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        task_sum = {t: 0.0 for t in net.task_names}
        task_cnt = {t: 0 for t in net.task_names}
        for start in range(0, n, hp.batch_size):
            idx = perm[start:start + hp.batch_size]
            X = train_set.X[idx]
            y = {t: train_set.y[t][idx] for t in net.task_names}
            masks = net._dropout_masks(len(idx), trunk_rng, head_rngs) if use_dropout else None
            loss, grads = net.loss_and_grads(X, y, masks=masks)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch)
            try:
                opt.step(params, grads)
            except DivergenceError:
                raise DivergenceError(f"non-finite gradient at epoch {epoch}", epoch) from None
            total += loss * len(idx)
            for t, ce in net._last_task_losses.items():
                present = y[t] >= 0
                task_sum[t] += float(ce[present].sum())
                task_cnt[t] += int(present.sum())
        if not all(np.all(np.isfinite(p)) for p in params):
            raise DivergenceError(f"non-finite parameters at epoch {epoch}", epoch)
        hist.loss.append(total / n)
        for t in net.task_names:
            hist.task_loss[t].append(task_sum[t] / task_cnt[t] if task_cnt[t] else 0.0)
        if validation is not None:
            for t, a in _accuracy(net, validation).items():
                hist.val_accuracy[t].append(a)
        if callback is not None:
            callback(epoch, hist)
    return hist


def fit_mtl(encoder: Encoder, train_set: EncodedDataset, hyperparams: Hyperparams,
            schema: DatasetSchema | None = None, validation=None):
    net = init_network(schema or train_set.schema, encoder, hyperparams)
    hist = train(net, train_set, validation)
    return net, hist


# ---------------------------------------------------------------- predict one

@dataclass(frozen=True)
class TaskPrediction:
    value: int
    label: str
    probs: np.ndarray

    def to_dict(self) -> dict:
        return {"value": self.value, "label": self.label, "probs": self.probs.tolist()}


def check_features(schema: DatasetSchema, record: SurveyRecord) -> list:
    """Validation for inference: labels are ignored and unseen categories tolerated."""
    bare = SurveyRecord(record.values, {})
    return [v for v in validate_record(schema, bare) if v.kind != "unknown category"]


def predict_records(net: MtlNetwork, records: Sequence[SurveyRecord]) -> list[dict[str, TaskPrediction]]:
    for r in records:
        problems = check_features(net.schema, r)
        if problems:
            raise PredictError(problems)
    X = net.encoder.encode_matrix(records)
    probs = net.predict_proba(X)
    out = []
    for i in range(len(records)):
        row = {}
        for t in net.schema.tasks:
            p = probs[t.name][i]
            k = int(np.argmax(p))
            v = index_class(t.scale, k)
            row[t.name] = TaskPrediction(v, t.scale.labels[k], p)
        out.append(row)
    return out


def predict(net: MtlNetwork, record: SurveyRecord) -> dict[str, TaskPrediction]:
    """Impute from training statistics, encode, and take the per-task argmax."""
    return predict_records(net, [record])[0]


# ----------------------------------------------------------------- persistence

def _canonical(payload: Mapping) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def model_payload(net: MtlNetwork) -> dict[str, Any]:
    hp = net.hyperparams
    weights = {
        "trunk": [{"W": l.W.reshape(-1).tolist(), "b": l.b.tolist()} for l in net.trunk],
        "heads": {t: [{"W": l.W.reshape(-1).tolist(), "b": l.b.tolist()} for l in net.heads[t]]
                  for t in net.task_names},
    }
    return {
        "format_version": FORMAT_VERSION,
        "schema": net.schema.to_dict(),
        "encoder": net.encoder.to_dict(),
        "architecture": {
            "input_dim": net.input_dim,
            "trunk_sizes": [l.n_out for l in net.trunk],
            "head_sizes": {t: [l.n_out for l in net.heads[t]] for t in net.task_names},
        },
        "weights": weights,
        "hyperparams": hp.to_dict(),
    }


def dumps_model(net: MtlNetwork) -> str:
    payload = model_payload(net)
    payload["checksum"] = hashlib.sha256(_canonical(payload)).hexdigest()
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"


def save_model(net: MtlNetwork, path) -> str:
    """Write the model as one JSON document; returns its checksum."""
    text = dumps_model(net)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return json.loads(text)["checksum"]


def _layer(entry: Mapping, n_in: int, n_out: int) -> DenseLayer:
    W = np.asarray(entry["W"], dtype=float)
    b = np.asarray(entry["b"], dtype=float)
    if W.size != n_in * n_out or b.size != n_out:
        raise ModelFileError(f"weight array length inconsistent with declared shape ({n_out}x{n_in})")
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise ModelFileError("non-finite weights")
    return DenseLayer(W.reshape(n_out, n_in).copy(), b.copy())


def loads_model(text: str) -> MtlNetwork:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"truncated or malformed model file: {exc}") from None
    if not isinstance(doc, dict):
        raise ModelFileError("model file must hold a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFileError(f"unsupported version {version!r} (expected {FORMAT_VERSION})")
    checksum = doc.pop("checksum", None)
    if checksum is None:
        raise ModelFileError("missing checksum")
    if hashlib.sha256(_canonical(doc)).hexdigest() != checksum:
        raise ModelFileError("checksum failure")
    try:
        schema = DatasetSchema.from_dict(doc["schema"])
        encoder = Encoder.from_dict(schema, doc["encoder"])
        hp = Hyperparams.from_dict(doc["hyperparams"])
        arch = doc["architecture"]
        weights = doc["weights"]
        d = int(arch["input_dim"])
        if d != encoder.dim:
            raise ModelFileError("declared input width disagrees with encoder")
        trunk = []
        w = d
        if len(arch["trunk_sizes"]) != len(weights["trunk"]):
            raise ModelFileError("trunk depth disagrees with weights")
        for size, entry in zip(arch["trunk_sizes"], weights["trunk"]):
            trunk.append(_layer(entry, w, int(size)))
            w = int(size)
        heads = {}
        for t in schema.tasks:
            sizes = arch["head_sizes"][t.name]
            entries = weights["heads"][t.name]
            if len(sizes) != len(entries) or sizes[-1] != t.n_classes:
                raise ModelFileError(f"head {t.name!r} disagrees with its scale")
            stack = []
            hw = w
            for size, entry in zip(sizes, entries):
                stack.append(_layer(entry, hw, int(size)))
                hw = int(size)
            heads[t.name] = stack
    except (KeyError, TypeError, ValueError, SchemaError) as exc:
        if isinstance(exc, ModelFileError):
            raise
        raise ModelFileError(f"malformed model file: {exc}") from None
    net = MtlNetwork(schema, encoder, hp, trunk, heads)
    net.checksum = checksum
    return net


def load_model(path) -> MtlNetwork:
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())


def model_checksum(net: MtlNetwork) -> str:
    return hashlib.sha256(_canonical(model_payload(net))).hexdigest()


def record_from_mapping(schema: DatasetSchema, features: Mapping[str, Any]) -> SurveyRecord:
    """Build a record from loosely typed input (JSON bodies, CSV dicts)."""
    values = {}
    for name, v in features.items():
        try:
            f = schema.feature(name)
        except KeyError:
            values[name] = v
            continue
        if v is None or (isinstance(v, str) and v.strip() in ("", "NA")):
            values[name] = MISSING
        elif not f.is_numeric and isinstance(v, (int, float)) and not isinstance(v, bool):
            values[name] = str(int(v)) if float(v).is_integer() else str(v)
        else:
            values[name] = v
    return SurveyRecord(values, {})
