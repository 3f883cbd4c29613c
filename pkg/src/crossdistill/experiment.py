"""Multi-seed runs and the verdicts drawn from them.

:func:`build_findings` is a pure function of per-seed metric rows.  Every
verdict is a threshold on a :class:`SeedComparison`, so the same rows
always produce the same report.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from threadpoolctl import threadpool_limits

from .config import ExperimentConfig
from .errors import CrossDistillError, StageError
from .evalsuite import SeedComparison, compare_across_seeds
from .pipeline import CONTROL, DISTILLED, NOISE, TEACHER, SeedResult, run_pipeline

SIGNIFICANCE = 0.05
MIN_SEEDS = 5
MAX_FAILED_FRACTION = 0.2

# Which verdicts each preset is responsible for.
PRESET_CLAUSES = {
    "homepage": ("F1a", "F1b", "F1c", "F2a"),
    "new-release": ("F3",),
    "radio": ("F2b",),
    "noise-ablation": ("noise",),
    "custom": ("gain",),
}


@dataclass
class Table:
    name: str
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)


@dataclass
class Verdict:
    clause: str
    passed: bool
    detail: str


@dataclass
class FindingReport:
    preset: str
    seeds: list[int]
    failures: list[tuple[int, str, str]] = field(default_factory=list)
    tables: list[Table] = field(default_factory=list)
    comparisons: dict[str, SeedComparison] = field(default_factory=dict)
    verdicts: list[Verdict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.verdicts) and all(v.passed for v in self.verdicts)

    def table(self, name: str) -> Table:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)


def _at_least(fraction: float, n: int) -> int:
    return math.ceil(fraction * n - 1e-9)


def _values(results, model, head, slice_="all"):
    out = {}
    for r in results:
        try:
            out[r.seed] = (r.fingerprint, r.metrics.get(head, None, slice_, model))
        except KeyError:
            pass
    return out


def _median(values):
    vals = sorted(v for v in values if v is not None)
    if not vals:
        return None
    mid = len(vals) // 2
    return vals[mid] if len(vals) % 2 else 0.5 * (vals[mid - 1] + vals[mid])


def _fmt(x):
    return "NA" if x is None else f"{x:.4f}"


def _gain_verdict(clause, cmp: SeedComparison, n, what) -> Verdict:
    need = _at_least(0.8, n)
    ok = (
        cmp.positive >= need
        and cmp.p_value is not None
        and cmp.p_value < SIGNIFICANCE
        and cmp.median_delta is not None
        and cmp.median_delta > 0
    )
    return Verdict(clause, ok, f"{what}: {cmp.positive}/{n} positive (need {need}), "
                              f"p={_fmt(cmp.p_value)}, median {_fmt(cmp.median_delta)}")


def _significant_verdict(clause, cmp: SeedComparison, what) -> Verdict:
    ok = (cmp.p_value is not None and cmp.p_value < SIGNIFICANCE
          and cmp.median_delta is not None and cmp.median_delta > 0)
    return Verdict(clause, ok, f"{what}: median {_fmt(cmp.median_delta)}, p={_fmt(cmp.p_value)} "
                              f"({cmp.positive}/{len(cmp.deltas)} positive)")


def _worse_teacher_verdict(clause, cmp: SeedComparison, n, what) -> Verdict:
    need = _at_least(0.8, n)
    return Verdict(clause, cmp.positive >= need,
                   f"{what}: teacher below control in {cmp.positive}/{n} seeds (need {need})")


def build_findings(config: ExperimentConfig, results: list[SeedResult],
                   failures=()) -> FindingReport:
    results = sorted(results, key=lambda r: r.seed)
    seeds = [r.seed for r in results]
    report = FindingReport(config.preset, seeds, sorted(failures))
    n_total = len(seeds) + len(report.failures)
    if n_total and len(report.failures) > MAX_FAILED_FRACTION * n_total:
        report.verdicts.append(Verdict(
            "aggregation", False,
            f"{len(report.failures)} of {n_total} seeds failed; refusing to aggregate"))
        return report
    n = len(seeds)

    heads = [h for h in config.distilled_heads() if h.serving and h.label is not None]
    distilled = [h for h in heads if h.aux_distill]
    plain = [h for h in heads if not h.aux_distill]
    kind = {h.name: ("auc" if h.kind == "binary" else "r2") for h in heads}

    def compare(key, base_model, model, head, slice_="all"):
        cmp = compare_across_seeds(_values(results, base_model, head, slice_),
                                   _values(results, model, head, slice_), key, min_seeds=1)
        report.comparisons[key] = cmp
        return cmp

    def med(model, head, slice_="all"):
        return _median(v for _, v in _values(results, model, head, slice_).values())

    t1 = Table("table1", ("head", "metric", "control", "teacher", "distilled", "median_delta", "positive", "p_value"))
    for h in distilled:
        gain = compare(f"{h.name}.distilled-control", CONTROL, DISTILLED, h.name)
        has_teacher = bool(_values(results, TEACHER, h.name))
        if has_teacher:
            compare(f"{h.name}.control-teacher", TEACHER, CONTROL, h.name)
        t1.rows.append((h.name, kind[h.name], med(CONTROL, h.name),
                        med(TEACHER, h.name) if has_teacher else None, med(DISTILLED, h.name),
                        gain.median_delta, gain.positive, gain.p_value))
    if t1.rows:
        report.tables.append(t1)

    t2 = Table("table2", ("head", "metric", "control", "distilled", "median_delta", "positive", "p_value"))
    for h in plain:
        gain = compare(f"{h.name}.distilled-control", CONTROL, DISTILLED, h.name)
        t2.rows.append((h.name, kind[h.name], med(CONTROL, h.name), med(DISTILLED, h.name),
                        gain.median_delta, gain.positive, gain.p_value))
    if t2.rows:
        report.tables.append(t2)

    ctr = next((h for h in heads if h.label == "click"), None)
    if ctr is not None:
        all_cmp = report.comparisons.get(f"{ctr.name}.distilled-control") or compare(
            f"{ctr.name}.distilled-control", CONTROL, DISTILLED, ctr.name)
        new_cmp = compare(f"{ctr.name}.new_item.distilled-control", CONTROL, DISTILLED, ctr.name, "new_item")
        t3 = Table("new_item", ("seed", "delta_all", "delta_new_item", "new_minus_all"))
        by_seed = dict(zip(all_cmp.seeds, all_cmp.deltas))
        for seed, d_new in zip(new_cmp.seeds, new_cmp.deltas):
            d_all = by_seed.get(seed)
            t3.rows.append((seed, d_all, d_new, None if d_all is None else d_new - d_all))
        report.tables.append(t3)

    if NOISE in {r.model for res in results for r in res.metrics.rows}:
        t4 = Table("noise", ("head", "metric", "control", "distilled", "noise",
                             "distilled_median_delta", "noise_median_delta", "noise_p_value"))
        for h in distilled:
            cmp = compare(f"{h.name}.noise-control", CONTROL, NOISE, h.name)
            gain = report.comparisons[f"{h.name}.distilled-control"]
            t4.rows.append((h.name, kind[h.name], med(CONTROL, h.name), med(DISTILLED, h.name),
                            med(NOISE, h.name), gain.median_delta, cmp.median_delta, cmp.p_value))
        report.tables.append(t4)

    verdicts = _verdicts(config.preset, report, n, distilled, plain, ctr)
    if n < MIN_SEEDS:
        # Tables are still useful for small runs; verdicts are not.
        for v in verdicts:
            v.passed = False
            v.detail += f" [only {n} seeds; verdicts need at least {MIN_SEEDS}]"
    report.verdicts.extend(verdicts)
    return report


def _verdicts(preset, report, n, distilled, plain, ctr):
    cmps = report.comparisons
    out = []
    clauses = PRESET_CLAUSES[preset]
    names = [h.name for h in distilled]
    if "F1a" in clauses:
        out.append(_worse_teacher_verdict("F1a", cmps["ctr.control-teacher"], n, "ctr auc"))
    if "F1b" in clauses:
        out.append(_gain_verdict("F1b", cmps["ctr.distilled-control"], n, "ctr auc"))
    if "F1c" in clauses:
        out.append(_worse_teacher_verdict("F1c.teacher", cmps["trail.control-teacher"], n, "trail r2"))
        out.append(_gain_verdict("F1c.gain", cmps["trail.distilled-control"], n, "trail r2"))
    if "F2a" in clauses:
        out.append(_significant_verdict("F2a", cmps["discovery.distilled-control"], "discovery auc"))
    if "F2b" in clauses:
        out.append(_significant_verdict("F2b", cmps["engagement.distilled-control"], "engagement auc"))
    if "F3" in clauses:
        rows = report.table("new_item").rows
        wins = sum(1 for r in rows if r[3] is not None and r[3] > 0)
        need = _at_least(0.7, n)
        out.append(Verdict("F3", wins >= need,
                           f"new-item ctr delta above overall delta in {wins}/{n} seeds (need {need})"))
    if "noise" in clauses:
        noise = cmps["ctr.noise-control"]
        gain = cmps["ctr.distilled-control"]
        limit = None if gain.median_delta is None else 0.5 * gain.median_delta
        ok = (noise.p_value is None or noise.p_value >= SIGNIFICANCE) and (
            limit is not None and noise.median_delta is not None and abs(noise.median_delta) < limit)
        out.append(Verdict("noise", ok,
                           f"noise ctr auc: p={_fmt(noise.p_value)} (need >= {SIGNIFICANCE}), "
                           f"|median| {_fmt(None if noise.median_delta is None else abs(noise.median_delta))} "
                           f"(need < {_fmt(limit)}, half the distilled median)"))
    if "gain" in clauses:
        for name in names:
            out.append(_gain_verdict(f"gain.{name}", cmps[f"{name}.distilled-control"], n, name))
    return out


def _run_seed(args):
    config, seed, resume = args
    with threadpool_limits(1):
        try:
            return run_pipeline(config, seed, resume=resume)
        except StageError as exc:
            return (seed, exc.stage, str(exc.cause))
        except CrossDistillError as exc:
            return (seed, "setup", str(exc))


def worker_count(n_seeds: int) -> int:
    cap = os.environ.get("CROSSDISTILL_THREADS")
    workers = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(workers, n_seeds))


def run_experiment(config: ExperimentConfig, resume: bool = True, log=None) -> FindingReport:
    """Run every seed (in parallel when allowed) and aggregate.

    Seeds are independent, and aggregation folds over sorted seed ids, so
    the report does not depend on the worker count.
    """
    jobs = [(config, seed, resume) for seed in sorted(config.seeds)]
    workers = worker_count(len(jobs))
    outputs = []
    if workers == 1:
        for job in jobs:
            outputs.append(_run_seed(job))
            if log:
                log(_describe(outputs[-1]))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for out in pool.map(_run_seed, jobs):
                outputs.append(out)
                if log:
                    log(_describe(out))
    results = [o for o in outputs if isinstance(o, SeedResult)]
    failures = [o for o in outputs if not isinstance(o, SeedResult)]
    return build_findings(config, results, failures)


def _describe(out) -> str:
    if isinstance(out, SeedResult):
        return f"seed {out.seed}: done ({out.run_dir})"
    seed, stage, msg = out
    return f"seed {seed}: FAILED in {stage}: {msg}"
