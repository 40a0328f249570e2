"""Accuracy metrics, allocation traces, cost estimators, and report files.

A report is written as (i) a versioned self-describing JSON document and
(ii) a flat CSV of the lower-triangular accuracy matrix. Both files are pure
functions of the run's config and seed: parsing the JSON reproduces the
in-memory report exactly, and identical runs produce byte-identical files.
The JSON carries a `wall_clock_seconds` key that stays null inside reports
so the determinism contract holds; measured timings go to the run summary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .allocator import MemoryPlan
from .core import Dataset, FedReplayError, ModelParams, ValidationError
from .mlp import MlpSpec, forward

SCHEMA_VERSION = 1


class ReportIOError(FedReplayError, OSError):
    """Report file could not be written or read."""


@dataclass(frozen=True)
class CostEstimate:
    """Operand values of the analytical complexity bounds with unit sample cost.

    comm           = rounds * (clients * params + 2 * classes)
    client_compute = 2 * rounds * info_iters * sum(dataset_sizes)
    server_compute = rounds * (clients + 1) * params + classes
    total          = rounds * ((2 * clients + 1) * params + 2 * classes
                               + 2 * info_iters * sum(dataset_sizes)) + classes

    `total` always equals comm + client_compute + server_compute.
    """

    comm: int
    client_compute: int
    server_compute: int
    total: int


@dataclass(frozen=True)
class PlanSummary:
    """Serialized view of one task boundary's MemoryPlan."""

    task: int
    per_client: tuple[int, ...]
    per_class: tuple[dict[int, int], ...]


@dataclass(frozen=True)
class ExperimentReport:
    """Full outcome of one seeded experiment run."""

    scenario: str
    seed: int
    per_task_overall: tuple[float, ...]
    accuracy_matrix: Mapping[tuple[int, int], float]
    a_avg: float
    a_last: float
    allocation_trace: tuple[PlanSummary, ...]
    cost_estimate: CostEstimate
    config_echo: Mapping[str, object]

    def __post_init__(self):
        object.__setattr__(self, "per_task_overall", tuple(self.per_task_overall))
        object.__setattr__(
            self, "accuracy_matrix", dict(sorted(self.accuracy_matrix.items()))
        )
        object.__setattr__(self, "allocation_trace", tuple(self.allocation_trace))
        object.__setattr__(self, "config_echo", dict(self.config_echo))
        n = len(self.per_task_overall)
        if n == 0:
            raise ValidationError("report requires at least one evaluated task")
        for t in range(n):
            for tau in range(t + 1):
                if (t, tau) not in self.accuracy_matrix:
                    raise ValidationError(f"accuracy matrix misses entry ({t}, {tau})")
        for acc in list(self.accuracy_matrix.values()) + list(self.per_task_overall):
            if not 0.0 <= acc <= 1.0:
                raise ValidationError(f"accuracy {acc} outside [0, 1]")
        if self.a_last != self.per_task_overall[-1]:
            raise ValidationError("a_last must equal the final overall accuracy")
        if abs(self.a_avg - sum(self.per_task_overall) / n) > 1e-12:
            raise ValidationError("a_avg must equal the mean of per-task accuracies")


def evaluate(params: ModelParams, spec: MlpSpec, test_set: Dataset) -> float:
    """Top-1 accuracy of the classifier on a test set."""
    if len(test_set) == 0:
        raise ValidationError("cannot evaluate on an empty test set")
    if int(test_set.label_vector.max()) >= spec.num_classes:
        raise ValidationError(
            f"test set contains class {int(test_set.label_vector.max())}, "
            f"head only covers {spec.num_classes}"
        )
    logits = forward(params, spec, test_set.feature_matrix)
    predicted = logits.argmax(axis=1)
    return float((predicted == test_set.label_vector).mean())


def summarize(per_task_acc: Sequence[float]) -> tuple[float, float]:
    """(a_avg, a_last) over the per-task overall accuracies."""
    accs = list(per_task_acc)
    if not accs:
        raise ValidationError("summarize requires at least one accuracy")
    return sum(accs) / len(accs), accs[-1]


def estimate_costs(
    num_clients: int,
    rounds: int,
    info_iters: int,
    param_count: int,
    dataset_sizes: Sequence[int],
    num_classes: int,
) -> CostEstimate:
    """Evaluate the complexity-bound operands with unit per-sample cost."""
    for name, v in (
        ("num_clients", num_clients),
        ("rounds", rounds),
        ("info_iters", info_iters),
        ("param_count", param_count),
        ("num_classes", num_classes),
    ):
        if v < 1:
            raise ValidationError(f"{name} must be >= 1, got {v}")
    data_total = int(sum(int(n) for n in dataset_sizes))
    comm = rounds * (num_clients * param_count + 2 * num_classes)
    client_compute = 2 * rounds * info_iters * data_total
    server_compute = rounds * (num_clients + 1) * param_count + num_classes
    total = (
        rounds
        * ((2 * num_clients + 1) * param_count + 2 * num_classes + 2 * info_iters * data_total)
        + num_classes
    )
    return CostEstimate(comm, client_compute, server_compute, total)


def plan_summary(task: int, plan: MemoryPlan) -> PlanSummary:
    clients = sorted(plan.per_client)
    return PlanSummary(
        task=task,
        per_client=tuple(plan.per_client[c] for c in clients),
        per_class=tuple(plan.quotas_for(c) for c in clients),
    )


def make_report(
    scenario: str,
    seed: int,
    per_task_overall: Sequence[float],
    accuracy_matrix: Mapping[tuple[int, int], float],
    a_avg: float,
    a_last: float,
    plans: Sequence[MemoryPlan],
    cost_estimate: CostEstimate,
    config_echo: Mapping[str, object],
) -> ExperimentReport:
    return ExperimentReport(
        scenario=scenario,
        seed=seed,
        per_task_overall=tuple(per_task_overall),
        accuracy_matrix=dict(accuracy_matrix),
        a_avg=a_avg,
        a_last=a_last,
        allocation_trace=tuple(plan_summary(t, p) for t, p in enumerate(plans)),
        cost_estimate=cost_estimate,
        config_echo=config_echo,
    )


def _report_document(report: ExperimentReport, wall_clock_seconds: float | None) -> dict:
    per_task = []
    for t, acc in enumerate(report.per_task_overall):
        per_task.append(
            {
                "task": t,
                "overall_acc": acc,
                "per_subset": [report.accuracy_matrix[(t, tau)] for tau in range(t + 1)],
            }
        )
    trace = [
        {
            "task": ps.task,
            "per_client": list(ps.per_client),
            "per_class": [{str(y): q for y, q in sorted(d.items())} for d in ps.per_class],
        }
        for ps in report.allocation_trace
    ]
    return {
        "schema_version": SCHEMA_VERSION,
        "config": dict(report.config_echo),
        "seed": report.seed,
        "scenario": report.scenario,
        "per_task": per_task,
        "a_avg": report.a_avg,
        "a_last": report.a_last,
        "allocation_trace": trace,
        "cost_estimate": {
            "comm": report.cost_estimate.comm,
            "client_compute": report.cost_estimate.client_compute,
            "server_compute": report.cost_estimate.server_compute,
            "total": report.cost_estimate.total,
        },
        "wall_clock_seconds": wall_clock_seconds,
    }


def emit_report(
    report: ExperimentReport, path: str | Path, wall_clock_seconds: float | None = None
) -> tuple[Path, Path]:
    """Write `<path>.json` and `<path>.csv`; returns both paths.

    The CSV holds one row per lower-triangular accuracy-matrix entry with
    columns eval_after_task, subset_task, accuracy (UTF-8, LF endings,
    full-precision floats).
    """
    base = Path(path)
    json_path = base.with_suffix(".json")
    csv_path = base.with_suffix(".csv")
    doc = _report_document(report, wall_clock_seconds)
    lines = ["eval_after_task,subset_task,accuracy"]
    for t in range(len(report.per_task_overall)):
        for tau in range(t + 1):
            lines.append(f"{t},{tau},{report.accuracy_matrix[(t, tau)]!r}")
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise ReportIOError(f"failed to write report under {base}: {exc}") from exc
    return json_path, csv_path


def load_report(json_path: str | Path) -> ExperimentReport:
    """Parse a structured report file back into an ExperimentReport."""
    try:
        with open(json_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ReportIOError(f"failed to read report {json_path}: {exc}") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported schema_version {doc.get('schema_version')} in {json_path}"
        )
    matrix = {}
    overall = []
    for entry in doc["per_task"]:
        t = entry["task"]
        overall.append(entry["overall_acc"])
        for tau, acc in enumerate(entry["per_subset"]):
            matrix[(t, tau)] = acc
    trace = tuple(
        PlanSummary(
            task=e["task"],
            per_client=tuple(e["per_client"]),
            per_class=tuple({int(y): q for y, q in d.items()} for d in e["per_class"]),
        )
        for e in doc["allocation_trace"]
    )
    ce = doc["cost_estimate"]
    return ExperimentReport(
        scenario=doc["scenario"],
        seed=doc["seed"],
        per_task_overall=tuple(overall),
        accuracy_matrix=matrix,
        a_avg=doc["a_avg"],
        a_last=doc["a_last"],
        allocation_trace=trace,
        cost_estimate=CostEstimate(
            ce["comm"], ce["client_compute"], ce["server_compute"], ce["total"]
        ),
        config_echo=doc["config"],
    )


def validate_report_file(json_path: str | Path) -> None:
    """Parse and invariant-check a written report; raises on any violation."""
    report = load_report(json_path)
    n = len(report.per_task_overall)
    recomputed = sum(report.per_task_overall) / n
    if abs(recomputed - report.a_avg) > 1e-12:
        raise ValidationError(f"{json_path}: stored a_avg drifts from recomputation")
