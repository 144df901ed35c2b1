"""Tables from RunRecords: one row per label, metrics averaged over records."""
from __future__ import annotations

import csv
import io
from collections import OrderedDict
from importlib import resources
from pathlib import Path
from typing import Iterable

from .errors import ConfigError
from .pipeline import RunRecord

COLUMNS = (("task_acc", "Task acc"), ("task_bac", "Task bac"), ("adv_acc", "Adv acc"), ("adv_bac", "Adv bac"))
ROW_ORDER = ("Baseline", "DiffPruning")


def demo_record_paths() -> list[Path]:
    root = resources.files("diffgate") / "demo_records"
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".json"))


def summarize(records: Iterable[RunRecord]) -> list[dict]:
    """Mean final metrics per label; Baseline first, then DiffPruning, then others by name."""
    groups: dict[str, list[dict]] = OrderedDict()
    for r in records:
        m = r.metrics.get("final")
        if m is None:
            raise ConfigError(f"record {r.record_hash[:12] or '?'} has no final metrics")
        groups.setdefault(r.label, []).append(m)
    if not groups:
        raise ConfigError("no run records given")
    labels = [l for l in ROW_ORDER if l in groups] + sorted(l for l in groups if l not in ROW_ORDER)
    rows = []
    for label in labels:
        ms = groups[label]
        row = {"label": label, "runs": len(ms)}
        for key, _ in COLUMNS:
            row[key] = sum(m[key] for m in ms) / len(ms)
        rows.append(row)
    return rows


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "runs"] + [k for k, _ in COLUMNS])
    for r in rows:
        w.writerow([r["label"], r["runs"]] + [f"{r[k]:.4f}" for k, _ in COLUMNS])
    return buf.getvalue()


def to_table(rows: list[dict]) -> str:
    header = [""] + [title for _, title in COLUMNS]
    body = [[r["label"]] + [f"{r[k]:.3f}" for k, _ in COLUMNS] for r in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]

    def fmt(line):
        return "  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(line))

    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule] + [fmt(b) for b in body]) + "\n"
