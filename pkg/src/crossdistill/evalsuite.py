"""Offline metrics and cross-seed significance.

AUC uses the Mann-Whitney rank statistic with average ranks for ties; R²
is computed against the target mean.  Undefined metrics raise
:class:`UndefinedMetricError` and are carried as absent (``None``) in
reports, never coerced to a number.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .domaingen import Dataset
from .errors import PairingError, UndefinedMetricError
from .ranker import BINARY, RankerConfig, ScoreTable

SLICES = ("all", "new_item", "established")
CSV_COLUMNS = ("model", "head", "slice", "metric", "value", "seed")


def auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    u = float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def r_squared(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError(f"preds {preds.shape} and targets {targets.shape} differ")
    if len(targets) < 2:
        raise UndefinedMetricError("R² needs at least two targets")
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("R² is undefined for constant targets")
    ss_res = float(np.sum((targets - preds) ** 2))
    return 1.0 - ss_res / ss_tot


@dataclass
class MetricRow:
    model: str
    head: str
    slice: str
    metric: str
    value: float | None
    seed: int
    count: int = 0


@dataclass
class MetricsReport:
    rows: list[MetricRow] = field(default_factory=list)
    fingerprint: str = ""

    def get(self, head, metric, slice_="all", model=None):
        for r in self.rows:
            if (r.head == head and r.slice == slice_ and (metric is None or r.metric == metric)
                    and (model is None or r.model == model)):
                return r.value
        raise KeyError((head, metric, slice_, model))

    def extend(self, other: "MetricsReport") -> None:
        self.rows.extend(other.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.model, r.head, r.slice, r.metric, "" if r.value is None else repr(r.value), r.seed])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, fingerprint: str = "") -> "MetricsReport":
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        rows = [
            MetricRow(m, h, s, k, None if v == "" else float(v), int(seed))
            for m, h, s, k, v, seed in reader
        ]
        return cls(rows, fingerprint)


def metric_kind(head) -> str:
    return "auc" if head.kind == BINARY else "r2"


def _slices(dataset: Dataset):
    new = np.asarray(dataset.is_new_item, dtype=bool)
    return {"all": np.ones(len(dataset), dtype=bool), "new_item": new, "established": ~new}


def head_metric(head, scores, dataset: Dataset, rows) -> float | None:
    try:
        if head.kind == BINARY:
            return auc(scores[rows], dataset.labels[head.label][rows])
        clicked = rows & (dataset.labels["click"] == 1)
        return r_squared(scores[clicked], dataset.labels["trail"][clicked])
    except UndefinedMetricError:
        return None


def slice_report(table: ScoreTable, dataset: Dataset, head, model_id="model", seed=0) -> MetricsReport:
    """Metric rows for one head on the all / new_item / established slices."""
    if len(table) != len(dataset) or not np.array_equal(table.row_id, dataset.row_id):
        raise ValueError("score table is not aligned with the dataset")
    scores = table.scores[head.name]
    report = MetricsReport(fingerprint=dataset.fingerprint)
    for name, rows in _slices(dataset).items():
        n = int(rows.sum())
        value = head_metric(head, scores, dataset, rows) if n else None
        report.rows.append(MetricRow(model_id, head.name, name, metric_kind(head), value, seed, n))
    return report


def model_report(table: ScoreTable, dataset: Dataset, config: RankerConfig, model_id, seed,
                 heads=None) -> MetricsReport:
    """Slice reports for every serving head of ``config``."""
    report = MetricsReport(fingerprint=dataset.fingerprint)
    for head in config.heads:
        if not head.serving or (heads is not None and head.name not in heads):
            continue
        report.extend(slice_report(table, dataset, head, model_id, seed))
    return report


def sign_test(deltas) -> float | None:
    """One-sided exact sign test for positive shift; zeros are dropped."""
    deltas = [d for d in deltas if d != 0]
    n = len(deltas)
    if n == 0:
        return None
    k = sum(1 for d in deltas if d > 0)
    return sum(math.comb(n, i) for i in range(k, n + 1)) / 2.0**n


@dataclass
class SeedComparison:
    metric: str
    seeds: list[int]
    deltas: list[float]
    median_delta: float | None
    p_value: float | None

    @property
    def positive(self) -> int:
        return sum(1 for d in self.deltas if d > 0)


def compare_across_seeds(control: dict, distilled: dict, metric: str = "",
                         min_seeds: int = 5) -> SeedComparison:
    """Pair per-seed values ``{seed: (fingerprint, value)}`` and sign-test them.

    Seeds whose value is absent on either side are skipped.
    """
    if set(control) != set(distilled):
        raise PairingError(f"unpaired seeds: {sorted(set(control) ^ set(distilled))}")
    if len(control) < min_seeds:
        raise PairingError(f"need at least {min_seeds} seeds, got {len(control)}")
    seeds, deltas = [], []
    for seed in sorted(control):
        fc, vc = control[seed]
        fd, vd = distilled[seed]
        if fc != fd:
            raise PairingError(f"seed {seed}: generator fingerprints differ ({fc} vs {fd})")
        if vc is None or vd is None:
            continue
        seeds.append(seed)
        deltas.append(vd - vc)
    median = float(np.median(deltas)) if deltas else None
    return SeedComparison(metric, seeds, deltas, median, sign_test(deltas))
