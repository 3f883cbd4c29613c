import json

import numpy as np
import pytest

from crossdistill.config import resolve
from crossdistill.domaingen import read_dataset
from crossdistill.errors import StageError
from crossdistill.evalsuite import MetricRow, MetricsReport
from crossdistill.experiment import build_findings, run_experiment
from crossdistill.pipeline import SeedResult, run_pipeline, seed_dir, teacher_cache_path
from crossdistill.ranker import load_checkpoint

TINY = {
    "eval_count": 3000,
    "domain": {"feature_count": 8, "source_count": 3000, "target_count": 400},
    "teacher": {"trunk": [8], "tower": [4]},
    "student": {"trunk": [4], "tower": [2]},
    "teacher_train": {"epochs": 1},
    "student_train": {"epochs": 2, "batch_size": 64},
}


def tiny(tmp_path, preset="homepage", **flags):
    return resolve(TINY, {"out": str(tmp_path), "seeds": "1,2", **flags}, preset=preset)


def test_homepage_run_writes_all_artifacts(tmp_path):
    cfg = tiny(tmp_path)
    res = run_pipeline(cfg, 1)
    d = seed_dir(cfg, 1)
    for name in ("config.json", "teacher.json", "augmented.tsv", "student-control.json",
                 "student-distilled.json", "metrics.csv", "metrics.txt", "manifest.json"):
        assert (d / name).exists(), name
    assert json.loads((d / "config.json").read_text()) == cfg.to_dict()
    aug = read_dataset(d / "augmented.tsv")
    assert aug.provenance["teacher"] == load_checkpoint(d / "teacher.json").fingerprint()
    assert aug.domain == "target"
    dist = load_checkpoint(d / "student-distilled.json").config
    assert {h.name for h in dist.heads if h.aux_slot} == {"ctr", "trail"}
    models = {(r.model, r.head) for r in res.metrics.rows}
    assert ("teacher", "ctr") in models and ("teacher", "trail") in models
    assert ("teacher", "discovery") not in models
    assert len(set(res.batch_digests.values())) == 1


def test_rerun_gives_identical_metrics(tmp_path):
    cfg = tiny(tmp_path)
    a = run_pipeline(cfg, 1, resume=False).metrics.to_csv()
    b = run_pipeline(cfg, 1, resume=False).metrics.to_csv()
    assert a == b


def test_teacher_is_cached_across_presets(tmp_path):
    home = tiny(tmp_path)
    radio = tiny(tmp_path, preset="radio")
    assert teacher_cache_path(home, 1) == teacher_cache_path(radio, 1)
    run_pipeline(home, 1)
    stamp = teacher_cache_path(home, 1).stat().st_mtime_ns
    run_pipeline(radio, 1)
    assert teacher_cache_path(home, 1).stat().st_mtime_ns == stamp


def test_radio_report_has_no_row_for_the_non_serving_head(tmp_path):
    res = run_pipeline(tiny(tmp_path, preset="radio"), 1)
    assert {r.head for r in res.metrics.rows} == {"engagement"}
    assert {r.model for r in res.metrics.rows} == {"control", "distilled"}


def test_noise_preset_trains_three_students(tmp_path):
    res = run_pipeline(tiny(tmp_path, preset="noise-ablation"), 1)
    assert {"control", "distilled", "noise"} <= {r.model for r in res.metrics.rows}
    assert (res.run_dir / "noise.tsv").exists()


def test_stage_failure_names_the_stage(tmp_path):
    cfg = tiny(tmp_path, **{"domain.ctr_gap": "0.9"})
    with pytest.raises(StageError) as info:
        run_pipeline(cfg, 1)
    assert info.value.stage == "generate"
    assert (seed_dir(cfg, 1) / "config.json").exists()


def test_experiment_report_independent_of_worker_count(tmp_path, monkeypatch):
    monkeypatch.setenv("CROSSDISTILL_THREADS", "1")
    one = run_experiment(tiny(tmp_path / "a", seeds="1,2,3,4,5"))
    monkeypatch.setenv("CROSSDISTILL_THREADS", "2")
    two = run_experiment(tiny(tmp_path / "b", seeds="1,2,3,4,5"))
    from crossdistill.report import findings_csv

    assert findings_csv(one) == findings_csv(two)
    assert [t.name for t in one.tables] == ["table1", "table2", "new_item"]
    assert one.table("table1").columns[2:5] == ("control", "teacher", "distilled")
    assert [v.clause for v in one.verdicts] == ["F1a", "F1b", "F1c.teacher", "F1c.gain", "F2a"]


def fake_result(seed, values, fingerprint="fp"):
    rows = [MetricRow(model, head, slice_, "auc", v, seed)
            for (model, head, slice_), v in values.items()]
    return SeedResult(seed, None, MetricsReport(rows, fingerprint))


def test_findings_verdicts_from_rows():
    cfg = resolve(preset="new-release")
    results = []
    for s in range(10):
        vals = {}
        for sl, bump in (("all", 0.01), ("new_item", 0.02 if s < 7 else 0.0), ("established", 0.01)):
            vals[("control", "ctr", sl)] = 0.7
            vals[("distilled", "ctr", sl)] = 0.7 + bump
        for head in ("trail", "discovery"):
            vals[("control", head, "all")] = 0.5
            vals[("distilled", head, "all")] = 0.5
        results.append(fake_result(s, vals))
    rep = build_findings(cfg, results)
    (f3,) = rep.verdicts
    assert f3.clause == "F3" and f3.passed and "7/10" in f3.detail
    results[0].metrics.rows = [r for r in results[0].metrics.rows if r.slice != "new_item"]
    rep = build_findings(cfg, results)
    assert not rep.verdicts[0].passed


def test_findings_refuse_aggregation_when_too_many_seeds_fail():
    cfg = resolve()
    results = [fake_result(s, {("control", "ctr", "all"): 0.5}) for s in range(7)]
    rep = build_findings(cfg, results, [(8, "train-teacher", "x"), (9, "augment", "y"), (10, "x", "z")])
    assert [v.clause for v in rep.verdicts] == ["aggregation"]
    assert not rep.passed


def test_findings_fail_with_too_few_seeds():
    cfg = resolve(preset="radio")
    results = [fake_result(s, {("control", "engagement", "all"): 0.5,
                               ("distilled", "engagement", "all"): 0.6}) for s in range(3)]
    rep = build_findings(cfg, results)
    assert not rep.passed and "at least 5" in rep.verdicts[0].detail


def test_noise_verdict_uses_half_the_distilled_median():
    cfg = resolve(preset="noise-ablation")
    results = []
    for s in range(10):
        vals = {("control", "ctr", "all"): 0.7, ("distilled", "ctr", "all"): 0.72,
                ("noise", "ctr", "all"): 0.7 + (0.005 if s % 2 else -0.004),
                ("control", "trail", "all"): 0.1, ("distilled", "trail", "all"): 0.2,
                ("noise", "trail", "all"): 0.1, ("control", "discovery", "all"): 0.6,
                ("distilled", "discovery", "all"): 0.6}
        for sl in ("new_item", "established"):
            vals[("control", "ctr", sl)] = 0.7
            vals[("distilled", "ctr", sl)] = 0.7
        results.append(fake_result(s, vals))
    rep = build_findings(cfg, results)
    (v,) = rep.verdicts
    assert v.clause == "noise" and v.passed
    noise = rep.table("noise").rows[0]
    assert noise[0] == "ctr" and np.isclose(noise[6], 0.0005)
