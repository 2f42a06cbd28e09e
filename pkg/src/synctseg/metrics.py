"""Append-only metrics stream: one JSON record per line, per-stage files.

Records are flushed as they are written so a crashed run keeps everything it
measured. Stages write to their own files (folds get per-fold files), and the
reader merges them in sorted filename order, so parallel folds never contend
on one file.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

METRICS_DIR = "metrics"


@dataclass
class MetricsRecord:
    run_id: str
    stage: str
    metric: str
    value: float
    fold: int | None = None
    case_id: str | None = None
    step: int | None = None
    wall_time: float = 0.0

    def __post_init__(self):
        self.value = float(self.value)
        if not -float("inf") < self.value < float("inf"):
            raise ValueError(f"metric {self.metric!r} has non-finite value {self.value}")


class MetricsWriter:
    """Appends records for one stage (and optional fold) of a run."""

    def __init__(self, run_dir, run_id: str, stage: str, fold: int | None = None):
        self.run_id = run_id
        self.stage = stage
        self.fold = fold
        directory = Path(run_dir) / METRICS_DIR
        directory.mkdir(parents=True, exist_ok=True)
        name = f"{stage}.ndjson" if fold is None else f"{stage}-fold{fold}.ndjson"
        self._file = open(directory / name, "a", encoding="utf-8")

    def write(self, metric: str, value: float, case_id: str | None = None,
              step: int | None = None):
        record = MetricsRecord(
            run_id=self.run_id,
            stage=self.stage,
            metric=metric,
            value=value,
            fold=self.fold,
            case_id=case_id,
            step=step,
            wall_time=time.time(),
        )
        self._file.write(json.dumps(asdict(record), sort_keys=True) + "\n")
        self._file.flush()

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_metrics(run_dir) -> list[MetricsRecord]:
    """All records under ``run_dir/metrics``, merged in sorted file order."""
    directory = Path(run_dir) / METRICS_DIR
    records: list[MetricsRecord] = []
    if not directory.is_dir():
        return records
    for path in sorted(directory.glob("*.ndjson")):
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    records.append(MetricsRecord(**json.loads(line)))
    return records
