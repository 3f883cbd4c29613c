"""Writing a :class:`FindingReport` to disk.

``findings.csv`` is the machine-readable form, in long format with one
value per record, and parses back into an equal report.  ``findings.txt``
holds aligned tables for people.  PNG figures are drawn with matplotlib's
Agg backend.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

from .evalsuite import SeedComparison
from .experiment import FindingReport, Table, Verdict

FINDINGS_COLUMNS = ("section", "name", "row", "field", "value")
FORMATS = ("csv", "txt", "png")


def _enc(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _dec(s: str):
    if s == "":
        return None
    if s in ("true", "false"):
        return s == "true"
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def findings_csv(report: FindingReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FINDINGS_COLUMNS)
    w.writerow(("meta", "preset", "", "", report.preset))
    w.writerow(("meta", "seeds", "", "", " ".join(str(s) for s in report.seeds)))
    for seed, stage, msg in report.failures:
        w.writerow(("failure", str(seed), stage, "message", msg))
    for t in report.tables:
        w.writerow(("table", t.name, "", "columns", " ".join(t.columns)))
        for i, row in enumerate(t.rows):
            for col, value in zip(t.columns, row):
                w.writerow(("table", t.name, str(i), col, _enc(value)))
    for key, c in report.comparisons.items():
        w.writerow(("comparison", key, "", "metric", c.metric))
        for seed, delta in zip(c.seeds, c.deltas):
            w.writerow(("comparison", key, str(seed), "delta", _enc(delta)))
        w.writerow(("comparison", key, "", "median_delta", _enc(c.median_delta)))
        w.writerow(("comparison", key, "", "p_value", _enc(c.p_value)))
    for v in report.verdicts:
        w.writerow(("verdict", v.clause, "", "passed", _enc(v.passed)))
        w.writerow(("verdict", v.clause, "", "detail", v.detail))
    return buf.getvalue()


def parse_findings_csv(text: str) -> FindingReport:
    reader = csv.reader(io.StringIO(text))
    if tuple(next(reader)) != FINDINGS_COLUMNS:
        raise ValueError("not a findings file")
    report = FindingReport("", [])
    tables: dict[str, Table] = {}
    comps: dict[str, SeedComparison] = {}
    verdicts: dict[str, Verdict] = {}
    for section, name, row, fld, value in reader:
        if section == "meta":
            if name == "preset":
                report.preset = value
            else:
                report.seeds = [int(s) for s in value.split()]
        elif section == "failure":
            report.failures.append((int(name), row, value))
        elif section == "table":
            if fld == "columns":
                tables[name] = Table(name, tuple(value.split()), [])
                continue
            t = tables[name]
            i = int(row)
            while len(t.rows) <= i:
                t.rows.append([])
            t.rows[i].append(_dec(value))
        elif section == "comparison":
            c = comps.setdefault(name, SeedComparison("", [], [], None, None))
            if fld == "metric":
                c.metric = value
            elif fld == "delta":
                c.seeds.append(int(row))
                c.deltas.append(float(value))
            else:
                setattr(c, fld, _dec(value))
        elif section == "verdict":
            v = verdicts.setdefault(name, Verdict(name, False, ""))
            if fld == "passed":
                v.passed = value == "true"
            else:
                v.detail = value
        else:
            raise ValueError(f"unknown findings section {section!r}")
    for t in tables.values():
        t.rows = [tuple(r) for r in t.rows]
    report.tables = list(tables.values())
    report.comparisons = comps
    report.verdicts = list(verdicts.values())
    return report


def _cell(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def render_table(t: Table) -> str:
    rows = [[_cell(x) for x in r] for r in t.rows]
    widths = [max(len(x) for x in col) for col in zip(t.columns, *rows)]
    lines = []
    for line in [list(t.columns), *rows]:
        cells = [c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths))]
        lines.append("  ".join(cells).rstrip())
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


TABLE_TITLES = {
    "table1": "Distilled tasks: control vs teacher vs distilled (medians over seeds)",
    "table2": "Tasks without distillation: control vs distilled (medians over seeds)",
    "new_item": "CTR AUC deltas (distilled - control): new-item slice vs all rows",
    "noise": "Noise ablation (teacher labels replaced with noise)",
}


def findings_text(report: FindingReport) -> str:
    out = [f"preset: {report.preset}", f"seeds: {' '.join(map(str, report.seeds)) or '-'}", ""]
    if report.failures:
        out.append("failed seeds:")
        out.extend(f"  seed {s}: {stage}: {msg}" for s, stage, msg in report.failures)
        out.append("")
    for t in report.tables:
        out.append(TABLE_TITLES.get(t.name, t.name))
        out.append(render_table(t))
        out.append("")
    out.append("verdicts:")
    for v in report.verdicts:
        out.append(f"  {'PASS' if v.passed else 'FAIL'}  {v.clause}: {v.detail}")
    return "\n".join(out) + "\n"


def write_figures(report: FindingReport, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    comps = [(k, c) for k, c in report.comparisons.items() if c.deltas]
    if comps:
        fig, ax = plt.subplots(figsize=(7, 0.6 * len(comps) + 1.5))
        for i, (key, c) in enumerate(comps):
            ax.scatter(c.deltas, [i] * len(c.deltas), s=14, color="tab:blue", alpha=0.7)
            if c.median_delta is not None:
                ax.plot([c.median_delta] * 2, [i - 0.3, i + 0.3], color="tab:red")
        ax.axvline(0.0, color="grey", lw=0.8, ls="--")
        ax.set_yticks(range(len(comps)), [k for k, _ in comps])
        ax.set_xlabel("per-seed delta (red: median)")
        fig.tight_layout()
        path = out_dir / "deltas.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    try:
        t1 = report.table("table1")
    except KeyError:
        t1 = None
    if t1 is not None:
        fig, axes = plt.subplots(1, len(t1.rows), figsize=(3.2 * len(t1.rows), 3), squeeze=False)
        for ax, row in zip(axes[0], t1.rows):
            head, metric, control, teacher, distilled = row[:5]
            names = ["control", "teacher", "distilled"]
            vals = [control, teacher, distilled]
            keep = [(n, v) for n, v in zip(names, vals) if v is not None]
            ax.bar([n for n, _ in keep], [v for _, v in keep], color=["tab:grey", "tab:orange", "tab:green"][: len(keep)])
            lo = min(v for _, v in keep)
            hi = max(v for _, v in keep)
            pad = 0.1 * (hi - lo or 1.0)
            ax.set_ylim(lo - pad, hi + pad)
            ax.set_title(f"{head} ({metric})")
        fig.tight_layout()
        path = out_dir / "table1.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


def emit_report(report: FindingReport, out_dir, formats=FORMATS) -> int:
    """Write the requested formats into ``out_dir``; return the exit code.

    The code is 0 iff every verdict passed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}")
    if "csv" in formats:
        (out_dir / "findings.csv").write_text(findings_csv(report))
    if "txt" in formats:
        (out_dir / "findings.txt").write_text(findings_text(report))
    if "png" in formats:
        write_figures(report, out_dir)
    return 0 if report.passed else 1
