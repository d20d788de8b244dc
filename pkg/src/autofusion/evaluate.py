"""Accuracy metrics, permutation complexity and fusion reports."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import LabeledDataset, TaskSplit, concat
from .nn import ModelParams, predict


class MappingError(KeyError):
    pass


class EmptyInputError(ValueError):
    pass


def accuracy(params: ModelParams, ds: LabeledDataset, class_map: Mapping[int, int] | None = None) -> float:
    """Percentage of samples whose argmax logit equals the (mapped) label.

    ``class_map`` sends dataset labels to model output indices; None means
    the labels already are output indices. ``np.argmax`` resolves ties to the
    lowest class index.
    """
    if len(ds) == 0:
        return 0.0
    labels = ds.labels
    if class_map is not None:
        missing = set(np.unique(labels).tolist()) - set(class_map)
        if missing:
            raise MappingError(f"labels {sorted(missing)} have no entry in the class map")
        lut = np.full(int(labels.max()) + 1, -1, dtype=np.int64)
        for k, v in class_map.items():
            if k < len(lut):
                lut[k] = v
        labels = lut[labels]
    if labels.max() >= params.arch.class_count:
        raise MappingError("mapped label outside the model's output space")
    pred = predict(params, ds.images).argmax(axis=1)
    return 100.0 * float((pred == labels).mean())


def evaluate_tasks(params: ModelParams, tasks: Sequence[LabeledDataset]) -> tuple[float, list[float], float]:
    """Joint accuracy over the concatenated tasks, per-task accuracies, and their mean.

    All tasks must carry labels in the model's global output indexing.
    """
    if not tasks:
        raise EmptyInputError("no evaluation tasks")
    per = [accuracy(params, t) for t in tasks]
    joint = accuracy(params, concat(tasks, "joint"))
    return joint, per, float(np.mean(per))


def joint_eval(params: ModelParams, split: TaskSplit):
    """``(acc_joint, acc_a, acc_b, acc_avg)`` on a two-task split."""
    acc_a = accuracy(params, split.task_a, split.inverse_map("a"))
    acc_b = accuracy(params, split.task_b, split.inverse_map("b"))
    joint = accuracy(params, split.joint())
    return joint, acc_a, acc_b, (acc_a + acc_b) / 2.0


def perm_complexity(P) -> float:
    """L1 distance ``sum |P - I|`` (twice the number of displaced rows)."""
    P = getattr(P, "P", P)
    P = np.asarray(P, dtype=np.float64)
    return float(np.abs(P - np.eye(len(P))).sum())


@dataclass
class RunResult:
    joint: float
    tasks: list
    seed: int | None = None
    perm_complexity: list = field(default_factory=list)


@dataclass
class FusionReport:
    method: str
    acc_joint: float
    acc_tasks: list
    acc_avg: float
    std_joint: float
    std_tasks: list
    seeds: list
    permutation_complexity: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def acc_task_a(self):
        return self.acc_tasks[0]

    @property
    def acc_task_b(self):
        return self.acc_tasks[1]


def _std(values):
    return statistics.stdev(values) if len(values) > 1 else 0.0


def build_report(method: str, runs: Sequence[RunResult], metadata: dict | None = None) -> FusionReport:
    """Means and sample (n-1) standard deviations over repeated fusions."""
    if not runs:
        raise EmptyInputError("build_report needs at least one run")
    joints = [r.joint for r in runs]
    ntask = len(runs[0].tasks)
    tasks = [[r.tasks[k] for r in runs] for k in range(ntask)]
    means = [statistics.fmean(v) for v in tasks]
    complexity = []
    if runs[0].perm_complexity:
        complexity = [statistics.fmean(c) for c in zip(*[r.perm_complexity for r in runs])]
    return FusionReport(method, statistics.fmean(joints), means, statistics.fmean(means),
                        _std(joints), [_std(v) for v in tasks], [r.seed for r in runs],
                        complexity, dict(metadata or {}))


def _task_names(n):
    return [f"task_{chr(ord('a') + k)}" for k in range(n)]


def report_rows(reports: Sequence[FusionReport]):
    ntask = max(len(r.acc_tasks) for r in reports)
    header = ["method", "joint", *_task_names(ntask), "avg", "std_joint", "seed"]
    rows = []
    for r in reports:
        seeds = ";".join("" if s is None else str(s) for s in r.seeds)
        tasks = [f"{v:.6f}" for v in r.acc_tasks] + [""] * (ntask - len(r.acc_tasks))
        rows.append([r.method, f"{r.acc_joint:.6f}", *tasks, f"{r.acc_avg:.6f}",
                     f"{r.std_joint:.6f}", seeds])
    return header, rows


def write_report_csv(path, reports: Sequence[FusionReport]):
    header, rows = report_rows(reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def format_table(reports: Sequence[FusionReport]) -> str:
    header, rows = report_rows(reports)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    out = io.StringIO()
    fmt = "  ".join("{:<%d}" % w for w in widths)
    out.write(fmt.format(*header) + "\n")
    out.write("  ".join("-" * w for w in widths) + "\n")
    for row in rows:
        out.write(fmt.format(*row) + "\n")
    return out.getvalue()
