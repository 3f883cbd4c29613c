"""Experiment configuration: presets, defaults, file + flag resolution.

A config is one JSON document.  Resolution order is: built-in defaults,
then the preset's overrides, then the config file, then ``--dotted.key
value`` flags.  Every leaf key of the document can be set by a flag.
"""
from __future__ import annotations

import copy
import difflib
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .distill import HOMEPAGE_MAPPING, RADIO_MAPPING, TaskMapping, teacher_config
from .domaingen import DomainSpec
from .errors import ConfigError
from .ranker import BINARY, REGRESSION, LossSpec, RankerConfig, TaskHead, TrainOptions

PRESETS = ("homepage", "radio", "new-release", "noise-ablation", "custom")

DEFAULTS: dict = {
    "preset": "homepage",
    "seeds": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
    "out": "runs",
    "eval_count": 200_000,
    "domain": {k: v for k, v in DomainSpec().to_dict().items() if k != "seed"},
    "teacher": {"trunk": [512, 256], "tower": [128]},
    "student": {"trunk": [24], "tower": [8], "heads": None},
    "teacher_train": {"epochs": 2, "batch_size": 256, "learning_rate": 1e-3,
                      "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "student_train": {"epochs": 60, "batch_size": 256, "learning_rate": 3e-3,
                      "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "loss": {"primary_weight": {}, "aux_weight": {}},
    "mapping": None,
}

# Keys whose values are free-form dictionaries (no fixed leaf names).
_OPEN_KEYS = {"loss.primary_weight", "loss.aux_weight"}


def _homepage_heads(tower):
    return (
        TaskHead("ctr", BINARY, "click", tower, aux_slot="ctr_aux"),
        TaskHead("trail", REGRESSION, "trail", tower, aux_slot="trail_aux"),
        TaskHead("discovery", BINARY, "discovery", tower),
    )


def _radio_heads(tower):
    return (
        TaskHead("engagement", BINARY, "radio_engagement", tower),
        TaskHead("cw", BINARY, None, tower, serving=False, aux_slot="cw_aux"),
    )


def strip_aux(heads) -> tuple[TaskHead, ...]:
    """Control-model heads: same towers, no aux units, no distill-only heads."""
    out = []
    for h in heads:
        if h.label is None:
            continue
        out.append(TaskHead(h.name, h.kind, h.label, h.tower, h.serving, None))
    return tuple(out)


def _flatten(d: dict, prefix="") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key not in _OPEN_KEYS:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _suggest(key: str, known) -> str:
    known = list(known)
    leaf = key.rsplit(".", 1)[-1]
    pool = known + [k.rsplit(".", 1)[-1] for k in known]
    hits = difflib.get_close_matches(key, pool, n=1, cutoff=0.6) or difflib.get_close_matches(leaf, pool, n=1, cutoff=0.6)
    if not hits:
        return ""
    hit = hits[0]
    if hit not in known:
        hit = next(k for k in known if k.rsplit(".", 1)[-1] == hit)
    return f"; did you mean {hit!r}?"


def _merge(base: dict, patch: dict, path="") -> None:
    known = _flatten(DEFAULTS)
    for k, v in patch.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}{_suggest(key, known)}")
        if isinstance(base[k], dict) and key not in _OPEN_KEYS:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            _merge(base[k], v, key + ".")
        else:
            base[k] = copy.deepcopy(v)


def _set_dotted(doc: dict, key: str, raw) -> None:
    known = _flatten(DEFAULTS)
    if key not in known:
        # Allow setting entries inside open dictionaries (loss.aux_weight.ctr).
        parent = key.rsplit(".", 1)[0]
        if parent not in _OPEN_KEYS:
            raise ConfigError(f"unknown config key {key!r}{_suggest(key, known)}")
    value = _coerce(raw)
    node = doc
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def _coerce(raw):
    if not isinstance(raw, str):
        return raw
    if "," in raw and not raw.lstrip().startswith(("[", "{")):
        return [_coerce(x) for x in raw.split(",") if x != ""]
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


@dataclass
class ExperimentConfig:
    preset: str
    seeds: list[int]
    out: str
    eval_count: int
    domain: dict
    teacher: dict
    student: dict
    teacher_train: dict
    student_train: dict
    loss: dict
    mapping: list | None
    raw: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if not self.seeds:
            raise ConfigError("seed list must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seed list has duplicates: {self.seeds}")
        if self.eval_count < 2:
            raise ConfigError("eval_count must be at least 2")
        if self.preset == "custom" and (not self.mapping or not self.student.get("heads")):
            raise ConfigError("the custom preset needs 'mapping' and 'student.heads'")
        self.domain_spec(0)
        self.task_mapping().validate(self.teacher_config(0))

    # -- derived objects --------------------------------------------------
    def domain_spec(self, seed: int) -> DomainSpec:
        try:
            return DomainSpec.from_dict({**self.domain, "seed": int(seed)})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def teacher_config(self, seed: int) -> RankerConfig:
        spec = self.domain_spec(seed)
        return teacher_config(spec.feature_count, tuple(self.teacher["trunk"]), tuple(self.teacher["tower"]), seed)

    def task_mapping(self) -> TaskMapping:
        if self.preset == "custom":
            return TaskMapping.from_list(self.mapping)
        if self.preset == "radio":
            return RADIO_MAPPING
        return HOMEPAGE_MAPPING

    def distilled_heads(self) -> tuple[TaskHead, ...]:
        tower = tuple(self.student["tower"])
        if self.preset == "custom":
            return tuple(TaskHead.from_dict(h) for h in self.student["heads"])
        if self.preset == "radio":
            return _radio_heads(tower)
        return _homepage_heads(tower)

    def student_config(self, seed: int, distilled: bool) -> RankerConfig:
        heads = self.distilled_heads()
        if not distilled:
            heads = strip_aux(heads)
        F = self.domain_spec(seed).feature_count
        return RankerConfig(F, tuple(self.student["trunk"]), heads, seed)

    def _train_options(self, section: dict, seed: int) -> TrainOptions:
        return TrainOptions(
            epochs=int(section["epochs"]),
            batch_size=int(section["batch_size"]),
            lr=float(section["learning_rate"]),
            seed=seed,
            beta1=float(section["beta1"]),
            beta2=float(section["beta2"]),
            eps=float(section["eps"]),
        )

    def teacher_options(self, seed: int) -> TrainOptions:
        return self._train_options(self.teacher_train, seed)

    def student_options(self, seed: int) -> TrainOptions:
        return self._train_options(self.student_train, seed)

    def loss_spec(self) -> LossSpec:
        return LossSpec(dict(self.loss["primary_weight"]), dict(self.loss["aux_weight"]))

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "seeds": list(self.seeds),
            "out": self.out,
            "eval_count": self.eval_count,
            "domain": dict(self.domain),
            "teacher": dict(self.teacher),
            "student": dict(self.student),
            "teacher_train": dict(self.teacher_train),
            "student_train": dict(self.student_train),
            "loss": copy.deepcopy(self.loss),
            "mapping": self.mapping,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        """Hash of everything that affects results (not seeds or output dir)."""
        d = self.to_dict()
        d.pop("seeds")
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def resolve(file_doc: dict | None = None, overrides: dict | None = None,
            preset: str | None = None) -> ExperimentConfig:
    doc = copy.deepcopy(DEFAULTS)
    if file_doc:
        _merge(doc, file_doc)
    if preset is not None:
        doc["preset"] = preset
    for key, raw in (overrides or {}).items():
        _set_dotted(doc, key, raw)
    _check_types(doc)
    return ExperimentConfig(**doc, raw=doc)


def _check_types(doc: dict) -> None:
    if isinstance(doc["seeds"], int):
        doc["seeds"] = [doc["seeds"]]
    try:
        doc["seeds"] = [int(s) for s in doc["seeds"]]
    except (TypeError, ValueError):
        raise ConfigError(f"seeds must be a list of integers, got {doc['seeds']!r}") from None
    for section in ("teacher_train", "student_train"):
        s = doc[section]
        if int(s["epochs"]) < 0:
            raise ConfigError(f"{section}.epochs must be >= 0")
        if int(s["batch_size"]) < 1:
            raise ConfigError(f"{section}.batch_size must be >= 1")
        if not float(s["learning_rate"]) > 0:
            raise ConfigError(f"{section}.learning_rate must be > 0")
        if not (0 <= float(s["beta1"]) < 1 and 0 <= float(s["beta2"]) < 1):
            raise ConfigError(f"{section}.beta1/beta2 must lie in [0, 1)")
    for section in ("teacher", "student"):
        for part in ("trunk", "tower"):
            sizes = doc[section][part]
            if not isinstance(sizes, list) or any(int(x) < 1 for x in sizes):
                raise ConfigError(f"{section}.{part} must be a list of sizes >= 1")
            doc[section][part] = [int(x) for x in sizes]


def parse_config(path=None, flags: dict | None = None, preset: str | None = None) -> ExperimentConfig:
    """Load ``path`` (JSON) if given, apply ``flags`` and ``preset``."""
    file_doc = None
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            file_doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return resolve(file_doc, flags, preset)
