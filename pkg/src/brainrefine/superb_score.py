"""Aggregate benchmark score normalized between a base (0) and a large (1000) model.

Each task contributes ``1000 * (s_u - s_base) / (s_large - s_base)``; the
aggregate is the mean over included tasks.  The formula needs no direction
information: for lower-is-better metrics numerator and denominator change
sign together.  Scores are not clipped.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable

HIGHER, LOWER = "higher_better", "lower_better"
KNOWN_DIRECTIONS = {"PER": LOWER, "WER": LOWER, "CER": LOWER, "EER": LOWER, "ACC": HIGHER, "F1": HIGHER}
DEFAULT_EXCLUDED = frozenset({"SF"})
CSV_HEADER = ["task", "metric", "direction", "base", "large", "value"]

FIXTURES = {
    "refined": "table1_refined.csv",
    "stimuli_pretrain": "table1_stimuli_pretrain.csv",
    "vanilla_base": "table1_vanilla_base.csv",
    "vanilla_large": "table1_vanilla_large.csv",
}


class ResultsFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskResult:
    task: str
    metric: str
    direction: str
    s_base: float
    s_large: float
    s_u: float

    def __post_init__(self):
        if self.direction not in (HIGHER, LOWER):
            raise ResultsFormatError(f"{self.task}: unknown direction {self.direction!r}")
        known = KNOWN_DIRECTIONS.get(self.metric.upper())
        if known and known != self.direction:
            raise ResultsFormatError(f"{self.task}: metric {self.metric} is {known}, not {self.direction}")
        if self.s_large == self.s_base:
            raise ResultsFormatError(f"{self.task}: base and large scores are equal ({self.s_base})")

    @property
    def key(self) -> tuple[str, str]:
        return self.task, self.metric


@dataclass
class ResultsTable:
    results: list
    excluded_tasks: frozenset = field(default=DEFAULT_EXCLUDED)

    def __post_init__(self):
        self.excluded_tasks = frozenset(self.excluded_tasks)
        seen = set()
        for r in self.results:
            if r.key in seen:
                raise ResultsFormatError(f"duplicate task/metric {r.task}/{r.metric}")
            seen.add(r.key)

    @property
    def included(self) -> list[TaskResult]:
        return [r for r in self.results if r.task not in self.excluded_tasks]

    @property
    def excluded(self) -> list[TaskResult]:
        return [r for r in self.results if r.task in self.excluded_tasks]

    def with_values(self, values: dict) -> "ResultsTable":
        """Copy with candidate scores replaced, keyed by task or ``(task, metric)``."""
        out = []
        for r in self.results:
            v = values.get(r.key, values.get(r.task, r.s_u))
            out.append(replace(r, s_u=float(v)))
        return ResultsTable(out, self.excluded_tasks)


def task_score(r: TaskResult) -> float:
    denom = r.s_large - r.s_base
    if denom == 0:
        raise ZeroDivisionError(f"task {r.task}: s_large == s_base")
    return 1000.0 * ((r.s_u - r.s_base) / denom)


def superb_s(table: ResultsTable) -> float:
    rows = table.included
    if not rows:
        raise ValueError("no included tasks to aggregate")
    return math.fsum(task_score(r) for r in rows) / len(rows)


def per_task_scores(table: ResultsTable) -> list[dict]:
    return [{"task": r.task, "metric": r.metric, "score": task_score(r),
             "included": r.task not in table.excluded_tasks} for r in table.results]


def _parse_float(text: str, path, lineno: int, column: str) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise ResultsFormatError(f"{path}:{lineno}: column {column!r} is not numeric: {text!r}")
    if not math.isfinite(v):
        raise ResultsFormatError(f"{path}:{lineno}: column {column!r} is not finite")
    return v


def load_results_csv(path, excluded_tasks: Iterable[str] = DEFAULT_EXCLUDED) -> ResultsTable:
    """Read ``task,metric,direction,base,large,value`` rows into a validated table."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ResultsFormatError(f"{path}: header must be {','.join(CSV_HEADER)}, got {reader.fieldnames}")
        results = []
        for lineno, row in enumerate(reader, start=2):
            try:
                results.append(TaskResult(
                    task=row["task"].strip(),
                    metric=row["metric"].strip(),
                    direction=row["direction"].strip(),
                    s_base=_parse_float(row["base"], path, lineno, "base"),
                    s_large=_parse_float(row["large"], path, lineno, "large"),
                    s_u=_parse_float(row["value"], path, lineno, "value"),
                ))
            except ResultsFormatError as exc:
                if str(exc).startswith(str(path)):
                    raise
                raise ResultsFormatError(f"{path}:{lineno}: {exc}")
    try:
        return ResultsTable(results, frozenset(excluded_tasks))
    except ResultsFormatError as exc:
        raise ResultsFormatError(f"{path}: {exc}")


def fixture_path(name: str) -> Path:
    """Path of a bundled results table (``refined``, ``stimuli_pretrain``, ``vanilla_base``, ``vanilla_large``)."""
    filename = FIXTURES.get(name, name)
    return Path(str(resources.files("brainrefine") / "data" / filename))
