"""One seed of an experiment, end to end.

generate -> teacher (source only) -> augment target -> train control and
distilled students on target rows -> evaluate on a held-out target sample.
Artifacts land in ``<out>/<preset>-<config digest>/seed-<seed>/``; trained
teachers are cached under ``<out>/cache/`` because several presets share
one teacher per seed.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .distill import augment, noise_teacher, train_teacher
from .domaingen import SOURCE, TARGET, make_ground_truth, sample_domain, write_dataset
from .errors import CrossDistillError, PairingError, StageError
from .evalsuite import MetricRow, MetricsReport, head_metric, metric_kind, model_report
from .ranker import (
    RankerModel,
    checkpoint_text,
    init_model,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

CONTROL = "control"
DISTILLED = "distilled"
NOISE = "noise"
TEACHER = "teacher"


@dataclass
class SeedResult:
    seed: int
    run_dir: Path
    metrics: MetricsReport
    batch_digests: dict[str, str] = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.metrics.fingerprint


def experiment_dir(config: ExperimentConfig) -> Path:
    return Path(config.out) / f"{config.preset}-{config.digest()}"


def seed_dir(config: ExperimentConfig, seed: int) -> Path:
    return experiment_dir(config) / f"seed-{seed}"


def teacher_cache_path(config: ExperimentConfig, seed: int) -> Path:
    key = {
        "domain": config.domain_spec(seed).to_dict(),
        "teacher": config.teacher_config(seed).to_dict(),
        "train": config.teacher_options(seed).to_dict(),
    }
    digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]
    return Path(config.out) / "cache" / f"teacher-{digest}.json"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _variants(config: ExperimentConfig) -> tuple[str, ...]:
    if config.preset == "noise-ablation":
        return (CONTROL, DISTILLED, NOISE)
    return (CONTROL, DISTILLED)


def teacher_report(teacher: RankerModel, evalset, config: ExperimentConfig, seed: int) -> MetricsReport:
    """Teacher metrics under the student head names it was mapped onto.

    Only mapped heads that are serving, labeled student heads are reported
    (a teacher column is comparable to a student column only then).
    """
    report = MetricsReport(fingerprint=evalset.fingerprint)
    student_heads = {h.aux_slot: h for h in config.distilled_heads() if h.aux_distill}
    table = predict(teacher, evalset)
    slices = {
        "all": None,
        "new_item": evalset.is_new_item,
        "established": ~evalset.is_new_item,
    }
    for teacher_head, slot in config.task_mapping().pairs:
        head = student_heads.get(slot)
        if head is None or not head.serving or head.label is None:
            continue
        scores = table.scores[teacher_head]
        for name, rows in slices.items():
            rows = np.ones(len(evalset), dtype=bool) if rows is None else np.asarray(rows)
            n = int(rows.sum())
            value = head_metric(head, scores, evalset, rows) if n else None
            report.rows.append(MetricRow(TEACHER, head.name, name, metric_kind(head), value, seed, n))
    return report


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except (CrossDistillError, ValueError, OSError, KeyError) as exc:
                raise StageError(name, exc) from exc
        return inner
    return wrap


@_stage("generate")
def _generate(config, seed):
    spec = config.domain_spec(seed)
    gt = make_ground_truth(spec)
    target = sample_domain(gt, TARGET, spec.target_count, seed)
    evalset = sample_domain(gt, TARGET, config.eval_count, seed, part="eval")
    return gt, target, evalset


@_stage("train-teacher")
def _teacher(config, seed, gt):
    path = teacher_cache_path(config, seed)
    if path.exists():
        return load_checkpoint(path)
    spec = gt.spec
    source = sample_domain(gt, SOURCE, spec.source_count, seed)
    model = train_teacher(source, config.teacher_config(seed), config.teacher_options(seed))
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, checkpoint_text(model, {"source_fingerprint": source.fingerprint}))
    return model


@_stage("augment")
def _augment(config, seed, target, teacher, run_dir):
    mapping = config.task_mapping()
    out = {DISTILLED: augment(target, teacher, mapping)}
    write_dataset(out[DISTILLED], run_dir / "augmented.tsv")
    if NOISE in _variants(config):
        out[NOISE] = noise_teacher(target, mapping, seed)
        write_dataset(out[NOISE], run_dir / "noise.tsv")
    return out


@_stage("train-student")
def _students(config, seed, target, augmented, run_dir):
    loss = config.loss_spec()
    opts = config.student_options(seed)
    results = {}
    for variant in _variants(config):
        cfg = config.student_config(seed, distilled=variant != CONTROL)
        data = target if variant == CONTROL else augmented[variant]
        res = train(init_model(cfg), data, loss, opts, require_domain=TARGET)
        save_checkpoint(res.model, run_dir / f"student-{variant}.json", {"variant": variant})
        results[variant] = res
    digests = {v: r.batch_digest for v, r in results.items()}
    if len(set(digests.values())) != 1:
        raise PairingError(f"students saw different training batches: {digests}")
    return {v: r.model for v, r in results.items()}, digests


@_stage("evaluate")
def _evaluate(config, seed, teacher, students, evalset):
    report = MetricsReport(fingerprint=evalset.fingerprint)
    report.extend(teacher_report(teacher, evalset, config, seed))
    for variant, model in students.items():
        table = predict(model, evalset)
        report.extend(model_report(table, evalset, model.config, variant, seed))
    return report


def metrics_text(report: MetricsReport) -> str:
    """Aligned plain-text rendering of a metrics report."""
    header = ("model", "head", "slice", "metric", "value", "n")
    rows = [
        (r.model, r.head, r.slice, r.metric, "NA" if r.value is None else f"{r.value:.4f}", str(r.count))
        for r in report.rows
    ]
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [header, *rows]]
    return "\n".join(lines) + "\n"


def load_seed_result(run_dir) -> SeedResult:
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    metrics = MetricsReport.from_csv((run_dir / "metrics.csv").read_text(), manifest["fingerprint"])
    return SeedResult(manifest["seed"], run_dir, metrics, manifest["batch_digests"])


def run_pipeline(config: ExperimentConfig, seed: int, resume: bool = True) -> SeedResult:
    """Run every stage for ``seed``; a failure raises :class:`StageError`.

    With ``resume`` a seed directory whose manifest matches the config is
    loaded instead of recomputed.  Partial outputs of a failed run are left
    in place.
    """
    run_dir = seed_dir(config, seed)
    config_text = config.to_json()
    if resume and (run_dir / "manifest.json").exists():
        if (run_dir / "config.json").read_text() == config_text:
            return load_seed_result(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(config_text)

    gt, target, evalset = _generate(config, seed)
    teacher = _teacher(config, seed, gt)
    save_checkpoint(teacher, run_dir / "teacher.json")
    augmented = _augment(config, seed, target, teacher, run_dir)
    students, digests = _students(config, seed, target, augmented, run_dir)
    metrics = _evaluate(config, seed, teacher, students, evalset)

    (run_dir / "metrics.csv").write_text(metrics.to_csv())
    (run_dir / "metrics.txt").write_text(metrics_text(metrics))
    manifest = {"seed": seed, "fingerprint": metrics.fingerprint, "batch_digests": digests,
                "teacher": teacher.fingerprint()}
    _atomic_write(run_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return SeedResult(seed, run_dir, metrics, digests)
