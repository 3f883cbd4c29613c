"""Offline teacher-label augmentation.

A teacher ranker is trained on the source domain only and never sees
target labels.  It then scores the target training rows, with unavailable
features defaulted exactly as the students default them, and its outputs
are copied into named teacher-label slots of the target dataset.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from . import rng
from .domaingen import SOURCE, Dataset
from .errors import ConfigError, ConflictError, DataError
from .ranker import (
    BINARY,
    REGRESSION,
    RankerConfig,
    RankerModel,
    TaskHead,
    TrainOptions,
    init_model,
    predict,
    train,
)

TEACHER_HEADS = ("click", "trail", "continue_watch", "discovery")


@dataclass(frozen=True)
class TaskMapping:
    """Ordered ``(teacher head, student aux slot)`` pairs."""

    pairs: tuple[tuple[str, str], ...]

    def __post_init__(self):
        slots = [s for _, s in self.pairs]
        heads = [h for h, _ in self.pairs]
        if len(set(slots)) != len(slots) or len(set(heads)) != len(heads):
            raise ConfigError(f"task mapping must be one-to-one: {self.pairs}")

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(s for _, s in self.pairs)

    def validate(self, teacher: RankerConfig) -> None:
        names = {h.name for h in teacher.heads}
        for head, _ in self.pairs:
            if head not in names:
                raise ConfigError(f"teacher has no head {head!r} (heads: {sorted(names)})")
            if teacher.head(head).label is None:
                raise ConfigError(f"teacher head {head!r} has no primary output")

    def to_list(self) -> list[list[str]]:
        return [list(p) for p in self.pairs]

    @classmethod
    def from_list(cls, pairs) -> "TaskMapping":
        return cls(tuple((str(h), str(s)) for h, s in pairs))


HOMEPAGE_MAPPING = TaskMapping((("click", "ctr_aux"), ("trail", "trail_aux")))
RADIO_MAPPING = TaskMapping((("continue_watch", "cw_aux"),))


def teacher_config(input_dim: int, trunk=(512, 256), tower=(128,), seed: int = 0) -> RankerConfig:
    heads = tuple(
        TaskHead(name, REGRESSION if name == "trail" else BINARY, name, tuple(tower))
        for name in TEACHER_HEADS
    )
    return RankerConfig(input_dim, tuple(trunk), heads, seed)


def train_teacher(source: Dataset, config: RankerConfig, opts: TrainOptions) -> RankerModel:
    """Fit the teacher on fully observed source rows."""
    if source.domain != SOURCE or not source.observed.all():
        raise DataError("the teacher trains on source rows with every feature observed")
    return train(init_model(config), source, None, opts, require_domain=SOURCE).model


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


def _check_free(dataset: Dataset, mapping: TaskMapping, overwrite: bool) -> None:
    if overwrite:
        return
    for slot in mapping.slots:
        if slot in dataset.teacher and not np.all(np.isnan(dataset.teacher[slot])):
            raise ConflictError(f"teacher slot {slot!r} is already filled; pass overwrite=True")


def augment(target: Dataset, teacher: RankerModel, mapping: TaskMapping,
            overwrite: bool = False) -> Dataset:
    """Fill ``mapping``'s slots with teacher predictions on ``target``.

    Binary heads contribute probabilities, regression heads raw values.
    Row order and count are preserved.
    """
    mapping.validate(teacher.config)
    _check_free(target, mapping, overwrite)
    table = predict(teacher, target)
    slots = {}
    for head, slot in mapping.pairs:
        col = np.asarray(table.scores[head], dtype=np.float64).copy()
        if teacher.config.head(head).kind == BINARY:
            # Probabilities must stay strictly inside (0, 1) to remain soft labels.
            col = np.clip(col, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
        slots[slot] = col
    provenance = {
        "teacher": teacher.fingerprint(),
        "mapping": mapping.to_list(),
        "kind": "teacher",
        "created": _timestamp(),
    }
    return target.with_teacher(slots, provenance)


def noise_teacher(target: Dataset, mapping: TaskMapping, seed: int,
                  overwrite: bool = False) -> Dataset:
    """Replace teacher labels with feature-independent noise.

    Binary slots get Uniform(0, 1); the regression (trail) slot gets a
    Gaussian with the mean and standard deviation of the observed trail
    labels.
    """
    _check_free(target, mapping, overwrite)
    slots = {}
    for head, slot in mapping.pairs:
        gen = rng.stream(seed, "noise_teacher", slot)
        if head == "trail":
            trail = target.labels["trail"]
            trail = trail[~np.isnan(trail)]
            if len(trail) < 2:
                raise DataError("need at least two clicked rows to match the trail distribution")
            slots[slot] = gen.normal(trail.mean(), trail.std(), len(target))
        elif head in TEACHER_HEADS:
            slots[slot] = gen.uniform(0.0, 1.0, len(target))
        else:
            raise ConfigError(f"unknown teacher head {head!r} in mapping")
    provenance = {"teacher": "noise", "mapping": mapping.to_list(), "kind": "noise",
                  "seed": seed, "created": _timestamp()}
    return target.with_teacher(slots, provenance)
