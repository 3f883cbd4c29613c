import json

import pytest

from crossdistill.cli import main

TINY_FLAGS = [
    "--eval_count", "2000",
    "--domain.feature_count", "8",
    "--domain.source_count", "2000",
    "--domain.target_count", "300",
    "--teacher.trunk", "[8]",
    "--teacher.tower", "[4]",
    "--student.trunk", "[4]",
    "--student.tower", "[2]",
    "--teacher_train.epochs", "1",
    "--student_train.epochs", "2",
]


def test_step_by_step_commands(tmp_path, capsys):
    d = tmp_path
    assert main(["gen", "--seed", "1", "-o", str(d / "t.tsv"), *TINY_FLAGS]) == 0
    assert main(["gen", "--seed", "1", "--part", "eval", "-o", str(d / "e.tsv"), *TINY_FLAGS]) == 0
    assert main(["train-teacher", "--seed", "1", "-o", str(d / "teacher.json"), *TINY_FLAGS]) == 0
    assert main(["augment", "--data", str(d / "t.tsv"), "--teacher", str(d / "teacher.json"),
                 "-o", str(d / "a.tsv"), *TINY_FLAGS]) == 0
    assert main(["train-student", "--data", str(d / "a.tsv"), "--variant", "distilled",
                 "-o", str(d / "s.json"), *TINY_FLAGS]) == 0
    capsys.readouterr()
    assert main(["eval", "--model", str(d / "s.json"), "--data", str(d / "e.tsv"),
                 "-o", str(d / "m.csv")]) == 0
    out = capsys.readouterr().out
    assert "ctr" in out and "discovery" in out
    assert (d / "m.csv").read_text().startswith("model,head,slice,metric,value,seed")


def test_outputs_are_not_clobbered_without_overwrite(tmp_path, capsys):
    out = tmp_path / "t.tsv"
    assert main(["gen", "-o", str(out), *TINY_FLAGS]) == 0
    assert main(["gen", "-o", str(out), *TINY_FLAGS]) == 2
    assert "--overwrite" in capsys.readouterr().err
    assert main(["gen", "-o", str(out), "--overwrite", *TINY_FLAGS]) == 0


def test_unknown_flag_reports_suggestion(tmp_path, capsys):
    code = main(["gen", "-o", str(tmp_path / "x.tsv"), "--student_train.learnig_rate", "0.1"])
    assert code == 2
    assert "learning_rate" in capsys.readouterr().err


def test_experiment_and_report_commands(tmp_path, capsys):
    args = ["--preset", "radio", "--seeds", "1,2", "--out", str(tmp_path), *TINY_FLAGS]
    # Two seeds cannot satisfy any verdict, so the exit code is 1.
    assert main(["experiment", *args]) == 1
    out = capsys.readouterr().out
    assert "F2b" in out and "Tasks without distillation" in out
    (exp_dir,) = [p for p in tmp_path.iterdir() if p.name.startswith("radio-")]
    first = (exp_dir / "report" / "findings.csv").read_text()
    assert (exp_dir / "report" / "deltas.png").exists()
    assert main(["report", *args]) == 1
    assert (exp_dir / "report" / "findings.csv").read_text() == first
    echo = json.loads((exp_dir / "seed-1" / "config.json").read_text())
    assert echo["preset"] == "radio" and echo["seeds"] == [1, 2]


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"domain": {"feature_count": 8, "target_count": 50}}))
    out = tmp_path / "t.tsv"
    assert main(["gen", "--config", str(cfg), "--domain.target_count", "20", "-o", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 22


def test_augment_requires_a_label_source(tmp_path):
    with pytest.raises(SystemExit):
        main(["augment", "--data", "x", "-o", str(tmp_path / "y")])
