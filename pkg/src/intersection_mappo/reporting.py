"""Metrics CSV and line-delimited JSON replay files."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

METRICS_COLUMNS = (
    "iteration", "env_steps", "model_steps", "mean_ep_reward", "mean_ep_len",
    "policy_loss", "value_loss", "kl", "clip_frac", "lr", "wallclock_s",
)


@dataclass
class IterationReport:
    iteration: int
    env_steps: int
    model_steps: int
    mean_ep_reward: float
    mean_ep_len: float
    policy_loss: float
    value_loss: float
    kl: float
    clip_frac: float
    lr: float
    wallclock_s: float

    def row(self) -> list[str]:
        return [repr(v) if isinstance(v, float) else str(v) for v in dataclasses.astuple(self)]

    def same_as(self, other: "IterationReport") -> bool:
        """Field-wise equality that treats NaN as equal to NaN."""
        for a, b in zip(dataclasses.astuple(self), dataclasses.astuple(other)):
            if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
                continue
            if a != b:
                return False
        return True


class MetricsWriter:
    """Append-only metrics CSV, flushed after every row."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        try:
            self._fh = open(self.path, "w" if fresh else "a", newline="")
        except OSError as exc:
            raise OSError(f"cannot open metrics file {self.path}: {exc}") from exc
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._writer.writerow(METRICS_COLUMNS)
            self._fh.flush()

    def write(self, report: IterationReport) -> None:
        try:
            self._writer.writerow(report.row())
            self._fh.flush()
        except OSError as exc:
            raise OSError(f"failed writing iteration {report.iteration} to {self.path}: {exc}") from exc

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def emit_metrics(reports, path) -> None:
    with MetricsWriter(path) as writer:
        for report in reports:
            writer.write(report)


def read_metrics(path) -> list[IterationReport]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        types = [f.type for f in dataclasses.fields(IterationReport)]
        out = []
        for row in reader:
            values = [int(v) if t in (int, "int") else float(v) for v, t in zip(row, types)]
            out.append(IterationReport(*values))
    return out


def truncate_metrics(path, iterations: int) -> None:
    """Drop rows past ``iterations`` (rows written after the last checkpoint)."""
    path = Path(path)
    if not path.exists():
        return
    lines = path.read_bytes().splitlines(keepends=True)
    path.write_bytes(b"".join(lines[:1 + iterations]))


def write_replay(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_replay(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
