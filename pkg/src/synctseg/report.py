"""Tables and boxplots derived purely from a run's metrics stream.

The summary follows the evaluation-table layout: one row per training-dataset
x testing-dataset pairing with Dice mean and standard deviation. Everything
is recomputed from the raw per-case records, so a run directory regenerates
its report bit-identically.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import read_metrics
from .stats import significance_test

REPORT_DIR = "report"
MIN_PAIRS = 5


class ReportError(RuntimeError):
    """The metrics stream lacks the records a report needs."""


def _eval_groups(run_dir) -> dict[str, list[tuple[int, str, float]]]:
    """Per-case eval Dice grouped by 'train->test' label, deterministically sorted."""
    groups: dict[str, list[tuple[int, str, float]]] = {}
    for rec in read_metrics(run_dir):
        if rec.stage == "eval" and rec.metric.startswith("dice:"):
            label = rec.metric.split(":", 1)[1]
            groups.setdefault(label, []).append((rec.step or 0, rec.case_id, rec.value))
    for label in groups:
        groups[label].sort()
    return groups


def _write_tsv(path: Path, header: list[str], rows: list[list]):
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(str(v) for v in row) + "\n")


def _boxplot(path: Path, labels: list[str], series: list[list[float]]):
    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(labels), 4.0))
    ax.boxplot(series, tick_labels=labels)
    ax.set_ylabel("Dice")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": "synctseg"})
    plt.close(fig)


def emit_report(run_dir) -> dict[str, Path]:
    """Write summary.tsv, dice_cases.tsv, and dice_boxplot.png for one run."""
    run_dir = Path(run_dir)
    groups = _eval_groups(run_dir)
    if not groups:
        raise ReportError(f"no eval metrics under {run_dir}; missing stages: eval")
    out = run_dir / REPORT_DIR
    out.mkdir(parents=True, exist_ok=True)

    summary_rows, case_rows = [], []
    labels, series = [], []
    for label in sorted(groups):
        values = [v for _, _, v in groups[label]]
        train, test = label.split("->")
        flag = "single-case" if len(values) == 1 else ""
        summary_rows.append([
            train, test, len(values),
            f"{np.mean(values):.6f}", f"{np.std(values):.6f}", flag,
        ])
        for fold, case_id, value in groups[label]:
            case_rows.append([label, fold, case_id, f"{value:.6f}"])
        labels.append(label)
        series.append(values)

    paths = {
        "summary": out / "summary.tsv",
        "cases": out / "dice_cases.tsv",
        "boxplot": out / "dice_boxplot.png",
    }
    _write_tsv(paths["summary"],
               ["train_dataset", "test_dataset", "cases", "dice_mean", "dice_std", "flag"],
               summary_rows)
    _write_tsv(paths["cases"], ["group", "fold", "case_id", "dice"], case_rows)
    _boxplot(paths["boxplot"], labels, series)
    return paths


def compare_runs(parent_dir, runs: list[tuple[str, Path]]) -> dict[str, Path]:
    """Comparative table, grouped boxplot, and pairwise signed-rank p-values.

    ``runs`` is a list of (label, run_dir). Dice scores are paired by
    (fold, case id); pairs present in both runs feed the significance test,
    which needs at least MIN_PAIRS of them (otherwise the p-value is 'na').
    """
    parent_dir = Path(parent_dir)
    per_run: dict[str, dict[str, dict[tuple, float]]] = {}
    for run_label, run_dir in runs:
        groups = _eval_groups(run_dir)
        if not groups:
            raise ReportError(f"no eval metrics under {run_dir}; missing stages: eval")
        per_run[run_label] = {
            label: {(fold, cid): v for fold, cid, v in rows}
            for label, rows in groups.items()
        }

    out = parent_dir / REPORT_DIR
    out.mkdir(parents=True, exist_ok=True)

    summary_rows, labels, series = [], [], []
    all_groups = sorted({g for by_group in per_run.values() for g in by_group})
    run_labels = [label for label, _ in runs]
    for group in all_groups:
        train, test = group.split("->")
        for run_label in run_labels:
            values = list(per_run[run_label].get(group, {}).values())
            if not values:
                continue
            summary_rows.append([
                f"{train}({run_label})", test, len(values),
                f"{np.mean(values):.6f}", f"{np.std(values):.6f}",
                "single-case" if len(values) == 1 else "",
            ])
            labels.append(f"{group}\n{run_label}")
            series.append(values)

    sig_rows = []
    for group in all_groups:
        for i, label_a in enumerate(run_labels):
            for label_b in run_labels[i + 1 :]:
                scores_a = per_run[label_a].get(group, {})
                scores_b = per_run[label_b].get(group, {})
                common = sorted(set(scores_a) & set(scores_b))
                if len(common) >= MIN_PAIRS:
                    p = significance_test([scores_a[k] for k in common],
                                          [scores_b[k] for k in common])
                    p_text = f"{p:.6g}"
                else:
                    p_text = "na"
                sig_rows.append([group, label_a, label_b, len(common), p_text])

    paths = {
        "summary": out / "summary.tsv",
        "significance": out / "significance.tsv",
        "boxplot": out / "dice_boxplot.png",
    }
    _write_tsv(paths["summary"],
               ["train_dataset", "test_dataset", "cases", "dice_mean", "dice_std", "flag"],
               summary_rows)
    _write_tsv(paths["significance"],
               ["group", "run_a", "run_b", "pairs", "p_value"], sig_rows)
    _boxplot(paths["boxplot"], labels, series)
    return paths
