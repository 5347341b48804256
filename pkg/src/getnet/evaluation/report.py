"""Rendering nested-CV reports as JSON, CSV and markdown tables."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from ..errors import DataError
from .metrics import METRICS
from .nested import NestedCvReport

HEADERS = {"ap": "AP", "recall": "Recall", "precision": "Precision", "f1": "F1"}


def dumps(report: NestedCvReport, timing: bool = False) -> str:
    return json.dumps(report.to_dict(timing=timing), indent=2, sort_keys=True) + "\n"


def write_json(report: NestedCvReport, path) -> None:
    Path(path).write_text(dumps(report), encoding="utf-8")


def load_report(path) -> NestedCvReport:
    try:
        return NestedCvReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a nested-cv report ({exc})") from exc


def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}"


def rows(report: NestedCvReport) -> list[dict]:
    """One row per (scope, metric): blocks first, then micro and macro."""
    out = []
    for b in report.blocks:
        for m in METRICS:
            out.append({"scope": f"{b.site}_{b.year}", "n_positive": b.n_positive, "metric": m,
                        "mean": _fmt(b.mean[m]), "std": _fmt(b.std[m])})
    for scope, agg in (("micro", report.micro), ("macro", report.macro)):
        for m in METRICS:
            if m in agg:
                out.append({"scope": scope, "n_positive": "", "metric": m,
                            "mean": _fmt(agg[m]["mean"]), "std": _fmt(agg[m]["std"])})
    return out


def to_csv(report: NestedCvReport) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["scope", "n_positive", "metric", "mean", "std"],
                       lineterminator="\n")
    w.writeheader()
    w.writerows(rows(report))
    return buf.getvalue()


def to_markdown(report: NestedCvReport) -> str:
    """Blocks as rows, metrics as "mean ± std" columns, efficiency underneath."""
    head = "| Site-year | N+ | " + " | ".join(HEADERS[m] for m in METRICS) + " |"
    lines = [head, "|" + "---|" * (len(METRICS) + 2)]

    def cell(mean, std):
        return "n/a" if mean is None else f"{mean:.3f} ± {std:.3f}"

    for b in report.blocks:
        lines.append(f"| {b.site} {b.year} | {b.n_positive} | "
                     + " | ".join(cell(b.mean[m], b.std[m]) for m in METRICS) + " |")
    for scope, agg in (("micro", report.micro), ("macro", report.macro)):
        if agg:
            lines.append(f"| {scope} | | " + " | ".join(
                cell(agg[m]["mean"], agg[m]["std"]) for m in METRICS) + " |")
    lines.append("")
    lines.append(f"Trainable parameters: {report.parameter_count:,}")
    eff = report.efficiency
    if eff.get("total_inference_seconds") is not None:
        lines.append(f"Inference: {eff['total_inference_seconds']:.3f} s total, "
                     f"{eff['per_sample_seconds'] * 1e3:.3f} ms per sample")
    return "\n".join(lines) + "\n"
