"""``crossdistill`` command line.

Every subcommand accepts ``--config PATH`` and ``--preset NAME`` and any
config key as a dotted flag, e.g. ``--student_train.epochs 20``.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import PRESETS, parse_config
from .distill import augment, noise_teacher, train_teacher
from .domaingen import DOMAINS, SOURCE, TARGET, make_ground_truth, read_dataset, sample_domain, write_dataset
from .errors import CrossDistillError
from .evalsuite import model_report
from .experiment import build_findings, run_experiment
from .pipeline import experiment_dir, load_seed_result, metrics_text
from .ranker import init_model, load_checkpoint, predict, save_checkpoint, train
from .report import FORMATS, emit_report


def _dotted(tokens: list[str]) -> dict:
    """Turn ``--a.b 1 --c=2`` leftovers into ``{"a.b": "1", "c": "2"}``."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise CrossDistillError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise CrossDistillError(f"flag --{key} needs a value")
            value = tokens[i + 1]
            i += 1
        out[key] = value
        i += 1
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--seeds", help="comma-separated seed list, e.g. 1,2,3")
    p.add_argument("--out", help="output root directory")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")


def _config(args, extra):
    flags = dict(extra)
    if args.seeds is not None:
        flags["seeds"] = args.seeds
    if args.out is not None:
        flags["out"] = args.out
    return parse_config(args.config, flags, args.preset)


def _seed(cfg, args):
    seed = getattr(args, "seed", None)
    return cfg.seeds[0] if seed is None else seed


def _check_output(path: Path, overwrite: bool) -> None:
    if path.exists() and not overwrite:
        raise CrossDistillError(f"{path} exists; pass --overwrite to replace it")
    path.parent.mkdir(parents=True, exist_ok=True)


def cmd_gen(args, cfg):
    seed = _seed(cfg, args)
    spec = cfg.domain_spec(seed)
    gt = make_ground_truth(spec)
    n = args.count or (spec.source_count if args.domain == SOURCE else spec.target_count)
    data = sample_domain(gt, args.domain, n, seed, part=args.part)
    _check_output(args.output, args.overwrite)
    write_dataset(data, args.output)
    print(f"wrote {len(data)} {args.domain} rows to {args.output}")
    return 0


def cmd_train_teacher(args, cfg):
    seed = _seed(cfg, args)
    if args.data:
        source = read_dataset(args.data)
    else:
        spec = cfg.domain_spec(seed)
        source = sample_domain(make_ground_truth(spec), SOURCE, spec.source_count, seed)
    model = train_teacher(source, cfg.teacher_config(seed), cfg.teacher_options(seed))
    _check_output(args.output, args.overwrite)
    save_checkpoint(model, args.output, {"source_fingerprint": source.fingerprint})
    print(f"wrote teacher checkpoint {args.output} ({model.fingerprint()})")
    return 0


def cmd_augment(args, cfg):
    target = read_dataset(args.data)
    mapping = cfg.task_mapping()
    if args.noise:
        out = noise_teacher(target, mapping, _seed(cfg, args), overwrite=args.overwrite)
    else:
        out = augment(target, load_checkpoint(args.teacher), mapping, overwrite=args.overwrite)
    _check_output(args.output, args.overwrite)
    write_dataset(out, args.output)
    print(f"wrote {len(out)} rows with slots {list(mapping.slots)} to {args.output}")
    return 0


def cmd_train_student(args, cfg):
    seed = _seed(cfg, args)
    data = read_dataset(args.data)
    model = init_model(cfg.student_config(seed, distilled=args.variant == "distilled"))
    res = train(model, data, cfg.loss_spec(), cfg.student_options(seed), require_domain=TARGET)
    _check_output(args.output, args.overwrite)
    save_checkpoint(res.model, args.output, {"variant": args.variant, "batch_digest": res.batch_digest})
    print(f"wrote {args.variant} student {args.output}; final loss {res.loss_trace[-1] if res.loss_trace else 'NA'}")
    return 0


def cmd_eval(args, cfg):
    model = load_checkpoint(args.model)
    data = read_dataset(args.data)
    report = model_report(predict(model, data), data, model.config, args.name, model.config.seed)
    if args.output:
        _check_output(args.output, args.overwrite)
        args.output.write_text(report.to_csv())
    sys.stdout.write(metrics_text(report))
    return 0


def cmd_experiment(args, cfg):
    report = run_experiment(cfg, resume=not args.overwrite, log=lambda m: print(m, flush=True))
    out = experiment_dir(cfg) / "report"
    code = emit_report(report, out, args.formats.split(","))
    print((out / "findings.txt").read_text() if (out / "findings.txt").exists() else "")
    print(f"report written to {out}")
    return code


def cmd_report(args, cfg):
    run = args.run or experiment_dir(cfg)
    results, failures = [], []
    for seed in cfg.seeds:
        d = Path(run) / f"seed-{seed}"
        if (d / "manifest.json").exists():
            results.append(load_seed_result(d))
        else:
            failures.append((seed, "missing", f"no completed run in {d}"))
    report = build_findings(cfg, results, failures)
    out = Path(run) / "report"
    code = emit_report(report, out, args.formats.split(","))
    print((out / "findings.txt").read_text() if (out / "findings.txt").exists() else "")
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="sample a domain to a dataset file")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--domain", choices=DOMAINS, default=TARGET)
    p.add_argument("--count", type=int)
    p.add_argument("--part", default="main", help="independent sample name (main, eval, ...)")
    p.add_argument("--output", "-o", type=Path, required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-teacher", help="train the teacher on source rows")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--data", type=Path, help="source dataset file (default: generate it)")
    p.add_argument("--output", "-o", type=Path, required=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("augment", help="fill teacher-label slots of a target dataset")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--teacher", type=Path)
    p.add_argument("--noise", action="store_true", help="use noise labels instead of a teacher")
    p.add_argument("--output", "-o", type=Path, required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-student", help="train a control or distilled student")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--variant", choices=("control", "distilled"), default="distilled")
    p.add_argument("--output", "-o", type=Path, required=True)
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--name", default="model")
    p.add_argument("--output", "-o", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run all seeds of a preset and write the report")
    _common(p)
    p.add_argument("--formats", default=",".join(FORMATS))
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="rebuild the report from finished seed runs")
    _common(p)
    p.add_argument("--run", type=Path, help="experiment directory (default: from config)")
    p.add_argument("--formats", default=",".join(FORMATS))
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "augment" and not args.noise and args.teacher is None:
            parser.error("augment needs --teacher or --noise")
        cfg = _config(args, _dotted(extra))
        return args.func(args, cfg)
    except CrossDistillError as exc:
        print(f"crossdistill: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
