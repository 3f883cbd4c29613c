"""Synthetic two-domain impression data.

A *source* domain (large, every feature observed) and a *target* domain
(small, a fixed subset of features unavailable) are drawn from one
linear-logit generative family.  Each task's weight vector mixes a
component shared by both domains with a per-domain component, so the
amount of shift is a single knob (``shared_weight_mix``).  Tasks are tied
together through a common latent "interest" direction, and the
``continue_watch`` and ``radio_engagement`` tasks additionally share a
second latent direction.

Labels are always generated from the full feature vector.  Masking is
applied afterwards, so unavailable features still carry signal that no
target-domain model can observe.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np
from scipy.optimize import brentq

from . import rng
from .errors import ConfigError, DataError, SchemaError
from .numeric import sigmoid, softplus

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)

TASKS = ("click", "trail", "discovery", "continue_watch", "radio_engagement")
BINARY_TASKS = ("click", "discovery", "continue_watch", "radio_engagement")

# Loadings of each task's shared component on the two latent directions.
# The remainder of unit variance goes to a task-specific direction.
INTEREST_LOADING = {
    "click": 0.85,
    "trail": 0.6,
    "discovery": 0.85,
    "continue_watch": 0.3,
    "radio_engagement": 0.3,
}
SESSION_LOADING = {"continue_watch": 0.9, "radio_engagement": 0.9}
# Relative logit scale per task (multiplies DomainSpec.signal_scale).
TASK_SCALE = {"click": 1.0, "trail": 1.0, "discovery": 0.6, "continue_watch": 1.0, "radio_engagement": 0.6}

BLOCK_ROWS = 8192


@dataclass(frozen=True)
class DomainSpec:
    feature_count: int = 64
    missing_fraction: float = 0.40
    ctr_gap: float = 0.02
    source_count: int = 200_000
    target_count: int = 2_000
    shared_weight_mix: float = 0.7
    new_item_rate_source: float = 0.10
    new_item_rate_target: float = 0.01
    label_noise_sd: float = 0.5
    seed: int = 0
    # Shape of the generative family.
    base_ctr: float = 0.25
    signal_scale: float = 2.0
    domain_scale: float = 1.6
    trail_bias: float = 0.5
    trail_shift: float = 0.3
    new_item_effect: float = 0.5
    new_item_interaction: float = 1.5

    def __post_init__(self):
        if self.feature_count < 2:
            raise ConfigError("feature_count must be >= 2")
        if not 0.0 <= self.missing_fraction <= 1.0:
            raise ConfigError("missing_fraction must lie in [0, 1]")
        if not 0.0 <= self.shared_weight_mix <= 1.0:
            raise ConfigError("shared_weight_mix must lie in [0, 1]")
        for name in ("new_item_rate_source", "new_item_rate_target"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.source_count < 1 or self.target_count < 1:
            raise ConfigError("source_count and target_count must be positive")
        if self.label_noise_sd < 0:
            raise ConfigError("label_noise_sd must be nonnegative")
        if not 0.0 < self.base_ctr < 1.0:
            raise ConfigError("base_ctr must lie in (0, 1)")

    @property
    def unavailable_count(self) -> int:
        return math.floor(self.feature_count * self.missing_fraction)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DomainSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown DomainSpec keys: {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Schema:
    feature_count: int
    unavailable: tuple[int, ...]
    new_item_index: int
    tasks: tuple[str, ...] = TASKS

    @property
    def feature_names(self) -> list[str]:
        return [
            "is_new_item" if j == self.new_item_index else f"f{j:02d}"
            for j in range(self.feature_count)
        ]

    def observed(self, domain: str) -> np.ndarray:
        obs = np.ones(self.feature_count, dtype=bool)
        if domain == TARGET:
            obs[list(self.unavailable)] = False
        return obs

    def to_dict(self) -> dict:
        return {
            "feature_count": self.feature_count,
            "unavailable": list(self.unavailable),
            "new_item_index": self.new_item_index,
            "tasks": list(self.tasks),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(
            int(d["feature_count"]),
            tuple(int(i) for i in d["unavailable"]),
            int(d["new_item_index"]),
            tuple(d["tasks"]),
        )


@dataclass
class GroundTruth:
    spec: DomainSpec
    schema: Schema
    weights: dict[str, dict[str, np.ndarray]]
    click_bias: dict[str, float]
    new_item_weights: np.ndarray
    continuous: np.ndarray  # indices of the real-valued features

    def click_logit(self, domain, x, is_new):
        """Click logit; new items switch to the cross-domain weight vector."""
        xc = x[:, self.continuous]
        established = xc @ self.weights["click"][domain]
        new = xc @ self.new_item_weights + self.spec.new_item_effect
        return np.where(is_new == 1.0, new, established) + self.click_bias[domain]

    def expected_ctr(self, domain: str, bias: float | None = None) -> float:
        """Population CTR for ``domain`` by Gauss-Hermite quadrature.

        ``w.x`` is exactly Gaussian under standard-normal features, so the
        expectation reduces to two one-dimensional logistic-normal integrals
        (established and new items).
        """
        b = self.click_bias[domain] if bias is None else bias
        rate = self._new_rate(domain)
        w = self.weights["click"][domain]
        wn = self.new_item_weights
        nodes, wts = np.polynomial.hermite_e.hermegauss(96)
        wts = wts / wts.sum()

        def logistic_normal(mean, sd):
            return float(np.dot(wts, sigmoid(mean + sd * nodes)))

        old = logistic_normal(b, float(np.linalg.norm(w)))
        new = logistic_normal(b + self.spec.new_item_effect, float(np.linalg.norm(wn)))
        return (1.0 - rate) * old + rate * new

    def _new_rate(self, domain):
        return self.spec.new_item_rate_source if domain == SOURCE else self.spec.new_item_rate_target


def _unit_normal(gen, dim):
    return gen.standard_normal(dim) / math.sqrt(dim)


def make_ground_truth(spec: DomainSpec) -> GroundTruth:
    """Draw task weights and calibrate click biases for both domains."""
    F = spec.feature_count
    gen = rng.stream(spec.seed, "ground_truth")
    new_index = F - 1
    continuous = np.arange(F - 1)
    k = spec.unavailable_count
    order = list(gen.permutation(continuous)) + [new_index]
    unavailable = tuple(sorted(int(i) for i in order[:k]))
    schema = Schema(F, unavailable, new_index)

    dim = F - 1
    interest = _unit_normal(gen, dim)
    session = _unit_normal(gen, dim)
    alpha = spec.shared_weight_mix
    lam = spec.domain_scale
    norm = math.sqrt(alpha**2 + ((1.0 - alpha) * lam) ** 2)
    weights: dict[str, dict[str, np.ndarray]] = {}
    shared_parts = {}
    for task in TASKS:
        a = INTEREST_LOADING[task]
        b = SESSION_LOADING.get(task, 0.0)
        own = _unit_normal(gen, dim)
        shared = a * interest + b * session + math.sqrt(1.0 - a * a - b * b) * own
        shared_parts[task] = shared
        per_domain = {d: lam * _unit_normal(gen, dim) for d in DOMAINS}
        weights[task] = {
            d: spec.signal_scale * TASK_SCALE[task] * (alpha * shared + (1.0 - alpha) * per_domain[d]) / norm
            for d in DOMAINS
        }
    # Appeal of new releases follows cross-platform taste only: the shared
    # click component, with no per-domain part.
    new_weights = spec.signal_scale * spec.new_item_interaction * shared_parts["click"]

    gt = GroundTruth(spec, schema, weights, {SOURCE: 0.0, TARGET: 0.0}, new_weights, continuous)
    gt.click_bias[SOURCE] = _solve_bias(gt, SOURCE, spec.base_ctr)
    goal = spec.base_ctr + spec.ctr_gap
    if not 0.0 < goal < 1.0:
        raise ConfigError(f"ctr_gap {spec.ctr_gap} pushes target CTR to {goal}, outside (0, 1)")
    gt.click_bias[TARGET] = _solve_bias(gt, TARGET, goal)
    return gt


def _solve_bias(gt: GroundTruth, domain: str, goal: float) -> float:
    def gap(b):
        return gt.expected_ctr(domain, bias=b) - goal

    lo, hi = -60.0, 60.0
    if gap(lo) > 0 or gap(hi) < 0:
        raise ConfigError(f"CTR {goal} is not reachable in domain {domain!r}")
    return float(brentq(gap, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=500))


@dataclass
class Example:
    row_id: int
    domain: str
    is_new_item: bool
    mask: np.ndarray
    features: np.ndarray
    click: int
    trail: float | None
    discovery: int
    continue_watch: int
    radio_engagement: int
    teacher: dict[str, float | None] = field(default_factory=dict)


@dataclass
class Dataset:
    """Column-oriented batch of examples from one domain.

    ``features`` holds NaN at unobserved positions; NaN is the sentinel and
    is never replaced in storage.  ``trail`` is NaN where ``click == 0``.
    ``teacher`` maps slot name to a float column, NaN meaning "not filled".
    """

    schema: Schema
    domain: str
    row_id: np.ndarray
    features: np.ndarray
    is_new_item: np.ndarray
    labels: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray] = field(default_factory=dict)
    fingerprint: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.row_id)
        if self.features.shape != (n, self.schema.feature_count):
            raise SchemaError(
                f"features {self.features.shape} do not match {n} rows x "
                f"{self.schema.feature_count} features"
            )
        for name, col in list(self.labels.items()) + list(self.teacher.items()):
            if len(col) != n:
                raise SchemaError(f"column {name!r} has {len(col)} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.row_id)

    @property
    def observed(self) -> np.ndarray:
        return self.schema.observed(self.domain)

    @property
    def mask(self) -> np.ndarray:
        """Per-row observation mask (every row of a domain shares it)."""
        return np.broadcast_to(self.observed, self.features.shape)

    def __getitem__(self, i: int) -> Example:
        trail = self.labels["trail"][i]
        return Example(
            row_id=int(self.row_id[i]),
            domain=self.domain,
            is_new_item=bool(self.is_new_item[i]),
            mask=self.observed.copy(),
            features=self.features[i].copy(),
            click=int(self.labels["click"][i]),
            trail=None if np.isnan(trail) else float(trail),
            discovery=int(self.labels["discovery"][i]),
            continue_watch=int(self.labels["continue_watch"][i]),
            radio_engagement=int(self.labels["radio_engagement"][i]),
            teacher={
                k: (None if np.isnan(v[i]) else float(v[i])) for k, v in self.teacher.items()
            },
        )

    def __iter__(self) -> Iterator[Example]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            schema=self.schema,
            domain=self.domain,
            row_id=self.row_id[idx],
            features=self.features[idx],
            is_new_item=self.is_new_item[idx],
            labels={k: v[idx] for k, v in self.labels.items()},
            teacher={k: v[idx] for k, v in self.teacher.items()},
            fingerprint=self.fingerprint,
            provenance=dict(self.provenance),
        )

    def with_teacher(self, slots: dict[str, np.ndarray], provenance: dict | None = None) -> "Dataset":
        teacher = {k: v.copy() for k, v in self.teacher.items()}
        teacher.update(slots)
        out = replace(self, teacher=teacher)
        if provenance is not None:
            out.provenance = provenance
        return out


def _fingerprint(spec: DomainSpec, domain: str, n: int, seed: int, part: str) -> str:
    blob = json.dumps(
        {"spec": spec.to_dict(), "domain": domain, "n": n, "seed": seed, "part": part},
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def sample_domain(gt: GroundTruth, domain: str, n: int, seed: int, part: str = "main") -> Dataset:
    """Draw ``n`` labeled impressions from ``domain``.

    ``part`` separates independent samples drawn under one seed (a training
    sample and a held-out sample, say).  Rows are produced in fixed blocks of
    ``BLOCK_ROWS``, each from its own derived stream, so content never
    depends on how generation is scheduled.
    """
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    if n < 1:
        raise ValueError("n must be at least 1")
    spec = gt.spec
    F = spec.feature_count
    rate = gt._new_rate(domain)
    feats = np.empty((n, F))
    labels = {t: np.empty(n) for t in TASKS}
    for block, start in enumerate(range(0, n, BLOCK_ROWS)):
        stop = min(n, start + BLOCK_ROWS)
        m = stop - start
        gen = rng.stream(seed, "sample", domain, part, block)
        x = gen.standard_normal((m, F))
        is_new = (gen.random(m) < rate).astype(np.float64)
        x[:, gt.schema.new_item_index] = is_new
        u = gen.random((m, 4))
        noise = gen.standard_normal(m)
        xc = x[:, gt.continuous]
        w = {t: gt.weights[t][domain] for t in TASKS}
        click = (u[:, 0] < sigmoid(gt.click_logit(domain, x, is_new))).astype(np.float64)
        shift = spec.trail_shift if domain == TARGET else 0.0
        trail = softplus(xc @ w["trail"] + spec.trail_bias + shift + spec.label_noise_sd * noise)
        labels["click"][start:stop] = click
        labels["trail"][start:stop] = np.where(click == 1.0, trail, np.nan)
        for col, task in enumerate(("discovery", "continue_watch", "radio_engagement"), start=1):
            labels[task][start:stop] = (u[:, col] < sigmoid(xc @ w[task])).astype(np.float64)
        feats[start:stop] = x
    observed = gt.schema.observed(domain)
    feats[:, ~observed] = np.nan
    return Dataset(
        schema=gt.schema,
        domain=domain,
        row_id=np.arange(n, dtype=np.int64),
        features=feats,
        is_new_item=feats[:, gt.schema.new_item_index] == 1.0,
        labels=labels,
        fingerprint=_fingerprint(spec, domain, n, seed, part),
    )


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least two examples to split")
    n_train = min(max(int(math.floor(n * train_fraction)), 1), n - 1)
    perm = rng.stream(seed, "split").permutation(n)
    return dataset.take(np.sort(perm[:n_train])), dataset.take(np.sort(perm[n_train:]))


def check_target_only(dataset: Dataset) -> None:
    if dataset.domain != TARGET:
        raise DataError(f"student data must come from the target domain, got {dataset.domain!r}")


# ---------------------------------------------------------------------------
# Line-delimited serialization
#
#   line 1   "#crossdistill-dataset/1 " + JSON header (schema, domain,
#            fingerprint, teacher slot names, provenance), keys sorted
#   line 2   tab-separated column names
#   line 3+  one record per example, tab-separated, in this field order:
#            row_id, domain, is_new_item (0/1), mask (bitstring, 1 = observed),
#            features (comma-separated reals, NA where unobserved),
#            click, trail (NA when unclicked), discovery, continue_watch,
#            radio_engagement, then one column per teacher slot (NA = empty)
#
# Reals are written with Python's shortest round-trip repr, so reading a file
# back reproduces every float bit for bit.
# ---------------------------------------------------------------------------

DATASET_MAGIC = "#crossdistill-dataset/1"
NA = "NA"
FIXED_COLUMNS = ("row_id", "domain", "is_new_item", "mask", "features") + TASKS


def _real(x: float) -> str:
    return NA if math.isnan(x) else repr(float(x))


def _parse_real(s: str) -> float:
    return math.nan if s == NA else float(s)


def dataset_text(dataset: Dataset) -> str:
    slots = sorted(dataset.teacher)
    header = {
        "schema": dataset.schema.to_dict(),
        "domain": dataset.domain,
        "fingerprint": dataset.fingerprint,
        "slots": slots,
        "provenance": dataset.provenance,
    }
    lines = [DATASET_MAGIC + " " + json.dumps(header, sort_keys=True), "\t".join(FIXED_COLUMNS + tuple(slots))]
    bits = "".join("1" if b else "0" for b in dataset.observed)
    observed = dataset.observed
    for i in range(len(dataset)):
        row = dataset.features[i]
        feats = ",".join(_real(v) if o else NA for v, o in zip(row.tolist(), observed))
        fields_ = [
            str(int(dataset.row_id[i])),
            dataset.domain,
            "1" if dataset.is_new_item[i] else "0",
            bits,
            feats,
            str(int(dataset.labels["click"][i])),
            _real(dataset.labels["trail"][i]),
            str(int(dataset.labels["discovery"][i])),
            str(int(dataset.labels["continue_watch"][i])),
            str(int(dataset.labels["radio_engagement"][i])),
        ]
        fields_ += [_real(dataset.teacher[s][i]) for s in slots]
        lines.append("\t".join(fields_))
    return "\n".join(lines) + "\n"


def write_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dataset_text(dataset))


def parse_dataset(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith(DATASET_MAGIC + " "):
        raise SchemaError("not a crossdistill dataset file")
    header = json.loads(lines[0][len(DATASET_MAGIC) + 1 :])
    schema = Schema.from_dict(header["schema"])
    domain = header["domain"]
    slots = list(header["slots"])
    if tuple(lines[1].split("\t")) != FIXED_COLUMNS + tuple(slots):
        raise SchemaError("column header does not match the declared slots")
    records = [ln.split("\t") for ln in lines[2:]]
    n = len(records)
    F = schema.feature_count
    expected_bits = "".join("1" if b else "0" for b in schema.observed(domain))
    row_id = np.empty(n, dtype=np.int64)
    feats = np.empty((n, F))
    is_new = np.empty(n, dtype=bool)
    labels = {t: np.empty(n) for t in TASKS}
    teacher = {s: np.empty(n) for s in slots}
    width = len(FIXED_COLUMNS) + len(slots)
    for i, rec in enumerate(records):
        if len(rec) != width:
            raise SchemaError(f"record {i} has {len(rec)} fields, expected {width}")
        if rec[1] != domain:
            raise SchemaError(f"record {i} is from domain {rec[1]!r}, file declares {domain!r}")
        if rec[3] != expected_bits:
            raise SchemaError(f"record {i} mask does not match the schema")
        row_id[i] = int(rec[0])
        is_new[i] = rec[2] == "1"
        values = rec[4].split(",")
        if len(values) != F:
            raise SchemaError(f"record {i} has {len(values)} features, expected {F}")
        feats[i] = [_parse_real(v) for v in values]
        for j, task in enumerate(TASKS):
            labels[task][i] = _parse_real(rec[5 + j])
        for j, s in enumerate(slots):
            teacher[s][i] = _parse_real(rec[len(FIXED_COLUMNS) + j])
    return Dataset(schema, domain, row_id, feats, is_new, labels, teacher,
                   header.get("fingerprint", ""), header.get("provenance", {}))


def read_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return parse_dataset(fh.read())
