"""Run directories: machine-readable report, delimited and aligned tables, figures."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

from .evaluation import EvalReport, MemoryCondition, Pipeline

REPORT_FORMAT = "memq-report"
REPORT_VERSION = 1


@lru_cache(maxsize=None)
def reference_values() -> dict:
    return json.loads(resources.files("memq.data").joinpath("reference_values.json").read_text("utf-8"))


def reference_map(report: EvalReport) -> float | None:
    """Published gpt-3.5-turbo MAP for the matching setting, if there is one."""
    refs = reference_values()
    p, c = report.setting.pipeline, report.setting.effective_condition
    if c == MemoryCondition.RETRIEVED:
        return refs["memory_incorporation"]["gpt-3.5-turbo"][p.value]["MAP"]
    if p == Pipeline.WO_MC_R:
        return refs["memory_incorporation"]["gpt-3.5-turbo"][p.value]["MAP"]
    return refs["memory_conditions"]["ChatGPT"][c.value]["MAP"]


def table_rows(reports: Sequence[EvalReport], ks: Sequence[int], with_refs: bool = False) -> list[list[str]]:
    header = ["pipeline", "condition", "n", "MAP"] + [f"R@{k}" for k in ks] + ["cls_acc", "failed"]
    if with_refs:
        header += ["ref_MAP"] + [f"ref_R@{k}" for k in ks]
    rows = [header]
    bm25 = reference_values()["retrieval"]["BM25"]
    for r in reports:
        row = [
            r.setting.pipeline.value,
            r.setting.memory_condition.value,
            str(r.n_questions),
            f"{r.map_score:.3f}",
        ]
        row += [f"{r.recall_at_k[k]:.3f}" if k in r.recall_at_k else "-" for k in ks]
        acc = r.classification_metrics["accuracy"] if r.classification_metrics else None
        row += [f"{acc:.3f}" if acc is not None else "-", str(len(r.failed))]
        if with_refs:
            ref = reference_map(r)
            row.append(f"{ref:.3f}" if ref is not None else "-")
            row += [f"{bm25[f'R@{k}']:.3f}" if r.recall_at_k and f"R@{k}" in bm25 else "-" for k in ks]
        rows.append(row)
    return rows


def render_tsv(rows: list[list[str]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, delimiter="\t", lineterminator="\n").writerows(rows)
    return buf.getvalue()


def render_aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for n, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def report_json(reports: Sequence[EvalReport], config: dict) -> str:
    return json.dumps(
        {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "config": config,
            "reports": [r.to_dict() for r in reports],
        },
        ensure_ascii=False,
        sort_keys=True,
        indent=1,
    ) + "\n"


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        if path.is_dir():
            h.update(str(f.relative_to(path)).encode("utf-8"))
        h.update(f.read_bytes())
    return h.hexdigest()


class RunDirExists(FileExistsError):
    pass


def write_run(
    run_dir: str | Path,
    reports: Sequence[EvalReport],
    config: dict,
    artifacts: dict[str, str | Path] | None = None,
    with_refs: bool = False,
    figures: bool = True,
) -> dict[str, Path]:
    """Write a fresh run directory; refuses to touch an existing non-empty one."""
    run_dir = Path(run_dir)
    if run_dir.exists() and any(run_dir.iterdir()):
        raise RunDirExists(f"run directory {run_dir} already exists and is not empty")
    run_dir.mkdir(parents=True, exist_ok=True)
    ks = sorted({k for r in reports for k in r.recall_at_k}) or [1, 2, 3, 5]
    rows = table_rows(reports, ks, with_refs)
    paths = {
        "config": run_dir / "config.json",
        "report": run_dir / "report.json",
        "tsv": run_dir / "table.tsv",
        "table": run_dir / "table.txt",
        "timings": run_dir / "timings.json",
        "artifacts": run_dir / "artifacts.json",
    }
    paths["config"].write_text(json.dumps(config, ensure_ascii=False, sort_keys=True, indent=1) + "\n", "utf-8")
    paths["report"].write_text(report_json(reports, config), "utf-8")
    paths["tsv"].write_text(render_tsv(rows), "utf-8")
    paths["table"].write_text(render_aligned(rows), "utf-8")
    paths["timings"].write_text(
        json.dumps({r.setting.label: r.latency_stats for r in reports}, indent=1, sort_keys=True) + "\n", "utf-8"
    )
    paths["artifacts"].write_text(
        json.dumps({k: file_sha256(v) for k, v in (artifacts or {}).items()}, indent=1, sort_keys=True) + "\n",
        "utf-8",
    )
    if figures:
        from .plots import plot_map_bars, plot_recall_curves

        fig_dir = run_dir / "figures"
        fig_dir.mkdir()
        refs = reference_values()
        if any(r.recall_at_k for r in reports):
            paths["recall_fig"] = plot_recall_curves(
                reports, fig_dir / "recall_at_k.png",
                {"BM25": refs["retrieval"]["BM25"]} if with_refs else None,
            )
        paths["map_fig"] = plot_map_bars(
            reports, fig_dir / "map.png",
            {r.setting.label: reference_map(r) for r in reports} if with_refs else None,
        )
    return paths
