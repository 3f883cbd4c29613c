"""Shared-bottom multi-task ranker with optional auxiliary distillation units.

The network is a ReLU trunk shared by all heads, followed by one ReLU tower
per head.  Each tower ends in up to two linear output units: a *primary*
unit trained on the head's own label and an *aux* unit trained on a teacher
soft label.  Output units are computed one at a time (matrix-vector), which
keeps a head's primary unit bit-identical whether or not an aux unit sits
next to it.

All parameters live in one flat float64 vector; per-layer arrays are views
into it, so an optimizer step on the flat vector updates the whole model.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nc
from . import rng
from .domaingen import Dataset, Schema
from .errors import ConfigError, DataError, SchemaError, ShapeError

BINARY = "binary"
REGRESSION = "regression"


@dataclass(frozen=True)
class TaskHead:
    """One task tower.

    ``label`` names the dataset label the primary unit trains on; ``None``
    means the head has no primary unit (a distill-only head).  ``aux_slot``
    names the teacher-label slot the aux unit trains on; ``None`` means no
    aux unit.  The aux unit uses the same loss family as the head: soft
    logistic loss for binary heads, squared error for regression heads.
    """

    name: str
    kind: str = BINARY
    label: str | None = None
    tower: tuple[int, ...] = (4,)
    serving: bool = True
    aux_slot: str | None = None

    def __post_init__(self):
        if self.kind not in (BINARY, REGRESSION):
            raise ConfigError(f"head {self.name!r}: kind must be binary or regression")
        if self.label is None and self.aux_slot is None:
            raise ConfigError(f"head {self.name!r} has neither a label nor an aux slot")
        if self.label is None and self.serving:
            raise ConfigError(f"head {self.name!r} has no primary unit and cannot serve")
        if any(h < 1 for h in self.tower):
            raise ConfigError(f"head {self.name!r}: tower sizes must be >= 1")

    @property
    def aux_distill(self) -> bool:
        return self.aux_slot is not None

    @property
    def units(self) -> tuple[str, ...]:
        out = ()
        if self.label is not None:
            out += ("primary",)
        if self.aux_slot is not None:
            out += ("aux",)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tower"] = list(self.tower)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskHead":
        d = dict(d)
        d["tower"] = tuple(d.get("tower", (4,)))
        return cls(**d)


@dataclass(frozen=True)
class RankerConfig:
    input_dim: int
    trunk: tuple[int, ...]
    heads: tuple[TaskHead, ...]
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if any(h < 1 for h in self.trunk):
            raise ConfigError("trunk sizes must be >= 1")
        if not self.heads:
            raise ConfigError("a ranker needs at least one head")
        names = [h.name for h in self.heads]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate head names in {names}")

    def head(self, name: str) -> TaskHead:
        for h in self.heads:
            if h.name == name:
                return h
        raise KeyError(name)

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in storage order."""
        out = []
        dims = [self.input_dim, *self.trunk]
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            out += [(f"trunk.{i}.w", (a, b)), (f"trunk.{i}.b", (b,))]
        for h in self.heads:
            tdims = [dims[-1], *h.tower]
            for i, (a, b) in enumerate(zip(tdims, tdims[1:])):
                out += [(f"{h.name}.tower.{i}.w", (a, b)), (f"{h.name}.tower.{i}.b", (b,))]
            for unit in h.units:
                out += [(f"{h.name}.{unit}.w", (tdims[-1],)), (f"{h.name}.{unit}.b", ())]
        return out

    def parameter_count(self) -> int:
        return int(sum(np.prod(shape, dtype=np.int64) for _, shape in self.layout()))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "trunk": list(self.trunk),
            "heads": [h.to_dict() for h in self.heads],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankerConfig":
        return cls(
            int(d["input_dim"]),
            tuple(d["trunk"]),
            tuple(TaskHead.from_dict(h) for h in d["heads"]),
            int(d.get("seed", 0)),
        )


class RankerModel:
    def __init__(self, config: RankerConfig, params: np.ndarray | None = None):
        self.config = config
        layout = config.layout()
        size = config.parameter_count()
        if params is None:
            params = np.zeros(size)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (size,):
            raise ShapeError(f"parameter vector has {params.shape}, config needs ({size},)")
        self.params = params
        self.views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in layout:
            n = int(np.prod(shape, dtype=np.int64))
            self.views[name] = params[offset : offset + n].reshape(shape)
            offset += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def copy(self) -> "RankerModel":
        return RankerModel(self.config, self.params.copy())

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        h.update(self.params.tobytes())
        return h.hexdigest()[:16]


def init_model(config: RankerConfig) -> RankerModel:
    """He-scaled normal weights, zero biases.

    Each array draws from a stream keyed by its own name, so two configs
    that share a parameter name and shape get identical initial values.
    """
    model = RankerModel(config)
    for name, shape in config.layout():
        if name.endswith(".b"):
            continue
        fan_in = shape[0]
        gen = rng.stream(config.seed, "init", name)
        model[name][...] = gen.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return model


def apply_feature_defaults(features, mask) -> np.ndarray:
    """Observed entries pass through; unobserved entries become 0.0.

    Works on one example (1-D) or a batch (2-D, mask broadcast over rows).
    """
    features = np.asarray(features, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if features.shape[-1] != mask.shape[-1]:
        raise SchemaError(f"features {features.shape} do not match mask {mask.shape}")
    return np.where(mask, features, 0.0)


def dense_features(dataset: Dataset) -> np.ndarray:
    return apply_feature_defaults(dataset.features, dataset.observed)


def check_schema(model: RankerModel, dataset: Dataset) -> None:
    if dataset.schema.feature_count != model.config.input_dim:
        raise SchemaError(
            f"dataset has {dataset.schema.feature_count} features, "
            f"model expects {model.config.input_dim}"
        )


def forward(model: RankerModel, x, cache: bool = False):
    """Run the network on a feature vector or a batch of them.

    Returns ``{head: {unit: output}}`` (scalars for a single vector).  With
    ``cache=True`` also returns the activations needed by :func:`backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != model.config.input_dim:
        raise ShapeError(f"expected {model.config.input_dim} features, got {X.shape[1]}")
    acts = {"trunk": [X]}
    h = X
    for i in range(len(model.config.trunk)):
        pre = nc.affine_forward(h, model[f"trunk.{i}.w"], model[f"trunk.{i}.b"])
        acts["trunk"].append(pre)
        h = nc.relu(pre)
    outputs = {}
    for head in model.config.heads:
        t = h
        tacts = [t]
        for i in range(len(head.tower)):
            pre = nc.affine_forward(t, model[f"{head.name}.tower.{i}.w"], model[f"{head.name}.tower.{i}.b"])
            tacts.append(pre)
            t = nc.relu(pre)
        acts[head.name] = tacts
        outs = {}
        for unit in head.units:
            val = t @ model[f"{head.name}.{unit}.w"] + model[f"{head.name}.{unit}.b"]
            outs[unit] = float(val[0]) if single else val
        outputs[head.name] = outs
    if cache:
        return outputs, acts
    return outputs


def backward(model: RankerModel, acts, grad_outputs) -> np.ndarray:
    """Backpropagate ``{head: {unit: dL/doutput}}`` into a flat gradient."""
    grad = np.zeros_like(model.params)
    g = RankerModel(model.config, grad)
    trunk_acts = acts["trunk"]
    top = nc.relu(trunk_acts[-1]) if model.config.trunk else trunk_acts[0]
    grad_top = np.zeros_like(top)
    for head in model.config.heads:
        tacts = acts[head.name]
        t = nc.relu(tacts[-1]) if head.tower else top
        grad_t = np.zeros_like(t)
        for unit in head.units:
            go = grad_outputs[head.name][unit]
            g[f"{head.name}.{unit}.w"][...] = t.T @ go
            g[f"{head.name}.{unit}.b"][...] = go.sum()
            grad_t += np.outer(go, model[f"{head.name}.{unit}.w"])
        for i in reversed(range(len(head.tower))):
            grad_pre = nc.relu_backward(tacts[i + 1], grad_t)
            layer_in = nc.relu(tacts[i]) if i else tacts[0]
            grad_t, gw, gb = nc.affine_backward(layer_in, model[f"{head.name}.tower.{i}.w"], grad_pre)
            g[f"{head.name}.tower.{i}.w"][...] = gw
            g[f"{head.name}.tower.{i}.b"][...] = gb
        grad_top += grad_t
    grad_h = grad_top
    for i in reversed(range(len(model.config.trunk))):
        grad_pre = nc.relu_backward(trunk_acts[i + 1], grad_h)
        layer_in = nc.relu(trunk_acts[i]) if i else trunk_acts[0]
        grad_h, gw, gb = nc.affine_backward(layer_in, model[f"trunk.{i}.w"], grad_pre)
        g[f"trunk.{i}.w"][...] = gw
        g[f"trunk.{i}.b"][...] = gb
    return grad


@dataclass(frozen=True)
class LossSpec:
    """Per-head loss weights; unspecified heads weigh 1.0 for both units."""

    primary_weight: dict = field(default_factory=dict)
    aux_weight: dict = field(default_factory=dict)

    def primary(self, head: str) -> float:
        return float(self.primary_weight.get(head, 1.0))

    def aux(self, head: str) -> float:
        return float(self.aux_weight.get(head, 1.0))

    def to_dict(self) -> dict:
        return {"primary_weight": dict(self.primary_weight), "aux_weight": dict(self.aux_weight)}


def _term(kind, out, target):
    if kind == BINARY:
        return nc.bce_with_logits(out, target)
    return nc.mse(out, target)


def compute_loss(heads, outputs, labels, teacher, loss_spec: LossSpec | None = None):
    """Mean per-row multi-task loss.

    ``labels`` maps label name to a column (``trail`` NaN where unclicked);
    ``teacher`` maps aux slot to a column, or is ``None`` for control mode,
    in which case aux units contribute nothing.  Returns
    ``(total, terms, grad_outputs)`` where ``terms`` maps ``"head/unit"`` to
    its weighted contribution.
    """
    loss_spec = loss_spec or LossSpec()
    terms = {}
    grads = {}
    total = 0.0
    n = None
    for head in heads:
        grads[head.name] = {}
        for unit in head.units:
            out = np.atleast_1d(np.asarray(outputs[head.name][unit], dtype=np.float64))
            n = len(out) if n is None else n
            if unit == "primary":
                weight = loss_spec.primary(head.name)
                target = np.atleast_1d(np.asarray(labels[head.label], dtype=np.float64))
                if head.label == "trail":
                    # Engagement is only defined for clicked rows.
                    rows = np.atleast_1d(np.asarray(labels["click"])) == 1
                    target = np.where(rows, target, 0.0)
                else:
                    rows = np.ones(len(out), dtype=bool)
            else:
                if teacher is None:
                    grads[head.name][unit] = np.zeros(len(out))
                    continue
                if head.aux_slot not in teacher:
                    raise DataError(f"head {head.name!r} needs teacher slot {head.aux_slot!r}")
                weight = loss_spec.aux(head.name)
                target = np.atleast_1d(np.asarray(teacher[head.aux_slot], dtype=np.float64))
                if np.any(np.isnan(target)):
                    raise DataError(f"teacher slot {head.aux_slot!r} for head {head.name!r} is unfilled")
                rows = np.ones(len(out), dtype=bool)
            loss, g = _term(head.kind, out, target)
            loss = np.where(rows, loss, 0.0)
            g = np.where(rows, g, 0.0)
            value = weight * float(loss.sum()) / len(out)
            terms[f"{head.name}/{unit}"] = value
            total += value
            grads[head.name][unit] = (weight / len(out)) * g
    return total, terms, grads


def batch_targets(dataset: Dataset, idx=None):
    """Label and teacher columns (optionally row-indexed) as plain dicts."""
    if idx is None:
        return dict(dataset.labels), (dict(dataset.teacher) if dataset.teacher else None)
    labels = {k: v[idx] for k, v in dataset.labels.items()}
    teacher = {k: v[idx] for k, v in dataset.teacher.items()} if dataset.teacher else None
    return labels, teacher


def loss_and_grad(model: RankerModel, X, labels, teacher, loss_spec=None):
    outputs, acts = forward(model, X, cache=True)
    total, terms, grad_out = compute_loss(model.config.heads, outputs, labels, teacher, loss_spec)
    return total, terms, backward(model, acts, grad_out)


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: RankerModel
    loss_trace: list[float]
    batch_digest: str


def _teacher_for(model: RankerModel, dataset: Dataset):
    slots = [h.aux_slot for h in model.config.heads if h.aux_distill]
    if not slots:
        return None
    missing = [s for s in slots if s not in dataset.teacher]
    if missing:
        raise DataError(f"dataset lacks teacher slots {missing} required by aux heads")
    return {s: dataset.teacher[s] for s in slots}


def train(model: RankerModel, dataset: Dataset, loss_spec: LossSpec | None = None,
          opts: TrainOptions | None = None, require_domain: str | None = None) -> TrainResult:
    """Minibatch Adam over seeded epoch shuffles.

    Returns a new model; ``model`` is not modified.  ``require_domain``
    rejects data from any other domain (students must never see source rows).
    """
    opts = opts or TrainOptions()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    check_schema(model, dataset)
    if require_domain is not None and dataset.domain != require_domain:
        raise DataError(f"training requires {require_domain!r} rows, got {dataset.domain!r}")
    model = model.copy()
    X = dense_features(dataset)
    teacher = _teacher_for(model, dataset)
    labels = dataset.labels
    state = nc.AdamState.zeros(len(model.params))
    digest = hashlib.sha256()
    trace = []
    n = len(dataset)
    for epoch in range(opts.epochs):
        order = rng.stream(opts.seed, "shuffle", epoch).permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, opts.batch_size):
            idx = order[start : start + opts.batch_size]
            xb = X[idx]
            digest.update(dataset.row_id[idx].tobytes())
            digest.update(xb.tobytes())
            lb = {k: v[idx] for k, v in labels.items()}
            tb = None if teacher is None else {k: v[idx] for k, v in teacher.items()}
            loss, _, grad = loss_and_grad(model, xb, lb, tb, loss_spec)
            new, state = nc.adam_step(model.params, grad, state, opts.lr, opts.beta1, opts.beta2, opts.eps)
            model.params[...] = new
            epoch_loss += loss * len(idx)
        trace.append(epoch_loss / n)
    return TrainResult(model, trace, digest.hexdigest())


@dataclass
class ScoreTable:
    row_id: np.ndarray
    scores: dict[str, np.ndarray]
    aux: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.row_id)


def predict(model: RankerModel, dataset: Dataset, batch_size: int = 8192) -> ScoreTable:
    """Serving scores per head (probabilities for binary heads).

    Aux outputs are returned separately (binary aux as probabilities) and are
    never used as serving scores.
    """
    check_schema(model, dataset)
    X = dense_features(dataset)
    parts = []
    for start in range(0, len(X), batch_size):
        parts.append(forward(model, X[start : start + batch_size]))
    scores, aux = {}, {}
    for head in model.config.heads:
        for unit in head.units:
            col = np.concatenate([p[head.name][unit] for p in parts]) if parts else np.empty(0)
            if head.kind == BINARY:
                col = nc.sigmoid(col)
            (scores if unit == "primary" else aux)[head.name] = np.asarray(col)
    return ScoreTable(dataset.row_id.copy(), scores, aux)


CHECKPOINT_FORMAT = "crossdistill.checkpoint/1"


def checkpoint_text(model: RankerModel, extra: dict | None = None) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "extra": extra or {},
        "params": [
            {"name": name, "shape": list(shape), "values": model[name].ravel().tolist()}
            for name, shape in model.config.layout()
        ],
    }
    return json.dumps(doc, sort_keys=True) + "\n"


def save_checkpoint(model: RankerModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_text(checkpoint_text(model, extra))
    return path


def load_checkpoint(path) -> RankerModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    model = RankerModel(RankerConfig.from_dict(doc["config"]))
    expected = model.config.layout()
    if [p["name"] for p in doc["params"]] != [name for name, _ in expected]:
        raise SchemaError(f"{path}: parameter list does not match the config layout")
    for entry, (name, shape) in zip(doc["params"], expected):
        model[name][...] = np.asarray(entry["values"], dtype=np.float64).reshape(shape)
    return model
