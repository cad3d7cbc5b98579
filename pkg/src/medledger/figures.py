"""Report-side figure and CSV rendering: the CLI writes these next to the
JSON/text report when asked for figures."""

from __future__ import annotations

import csv
from collections import Counter
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def write_assertions_csv(report: dict, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "check", "passed"])
        for entry in report["assertions"]:
            writer.writerow([entry["name"], entry["check"], entry["passed"]])


def write_epidemic_csv(view: dict, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "condition", "period_start", "period_end", "count"])
        for condition, count in view["record_tags"].items():
            writer.writerow(["record-metadata", condition, "", "", count])
        for note in view["notifications"]:
            for condition, count in note["counts"].items():
                writer.writerow(
                    ["notification", condition, note["period_start"], note["period_end"], count]
                )


def render_epidemic_figure(view: dict, path: Path) -> None:
    """Tagged-record counts next to notified totals, one bar pair per
    condition."""
    conditions = sorted(set(view["record_tags"]) | set(view["totals"]))
    if not conditions:
        conditions = ["(none)"]
    tagged = [view["record_tags"].get(c, 0) for c in conditions]
    notified = [view["totals"].get(c, 0) for c in conditions]
    x = range(len(conditions))
    fig, ax = plt.subplots(figsize=(max(4, len(conditions) * 1.6), 3.2))
    width = 0.38
    ax.bar([i - width / 2 for i in x], tagged, width, label="tagged records")
    ax.bar([i + width / 2 for i in x], notified, width, label="notified")
    ax.set_xticks(list(x))
    ax.set_xticklabels(conditions, rotation=20, ha="right")
    ax.set_ylabel("count")
    ax.set_title("public-health view")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_activity_figure(trace_entries: list[tuple[int, str, bytes]], path: Path) -> None:
    """Cumulative processed events over logical time, one line per kind."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    by_kind: dict[str, list[int]] = {}
    for time, kind, _ in trace_entries:
        by_kind.setdefault(kind, []).append(time)
    for kind in sorted(by_kind):
        times = by_kind[kind]
        counts = Counter(times)
        xs = sorted(counts)
        ys = []
        total = 0
        for t in xs:
            total += counts[t]
            ys.append(total)
        ax.step(xs, ys, where="post", label=kind)
    ax.set_xlabel("logical time (ms)")
    ax.set_ylabel("events processed")
    ax.set_title("network activity")
    if by_kind:
        ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_figures(report: dict, trace_entries: list, outdir: Path | str) -> list[Path]:
    """Write the delimited outputs and figures for one scenario report;
    returns the created paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    created = []

    assertions_csv = outdir / "assertions.csv"
    write_assertions_csv(report, assertions_csv)
    created.append(assertions_csv)

    activity_png = outdir / "network_activity.png"
    render_activity_figure(trace_entries, activity_png)
    created.append(activity_png)

    view = report.get("epidemic_view")
    if view is not None:
        epidemic_csv = outdir / "epidemic.csv"
        write_epidemic_csv(view, epidemic_csv)
        created.append(epidemic_csv)
        epidemic_png = outdir / "epidemic.png"
        render_epidemic_figure(view, epidemic_png)
        created.append(epidemic_png)
    return created
