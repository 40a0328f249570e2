"""Synthetic datasets, Dirichlet non-IID partitioning, and task streams.

Class-conditional Gaussian blobs stand in for real data: class k's mean sits
on a deterministic base-L lattice in feature space with unit covariance, so
streams are fully reproducible from (scenario parameters, seed). A domain
increment translates every class mean by a constant vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import (
    ClassHistogram,
    Dataset,
    LabeledSample,
    ValidationError,
    derive_seed,
    largest_remainder_round,
    seeded_rng,
)

SCENARIOS = ("FCIL", "FDIL", "FCDIL")

LATTICE_SPACING = 4.0
DOMAIN_SHIFT_NORM = 2.0
TEST_FRACTION = 0.2
# uid stride per task keeps uids globally unique across a stream and makes a
# sample's task of origin recoverable as uid // TASK_UID_STRIDE
TASK_UID_STRIDE = 1_000_000


@dataclass(frozen=True)
class TaskSpec:
    """One stage of an incremental stream: active classes and a domain id."""

    task_index: int
    class_set: tuple[int, ...]
    domain_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_set", tuple(sorted(int(c) for c in self.class_set)))
        if not self.class_set:
            raise ValidationError(f"task {self.task_index} has an empty class set")


@dataclass(frozen=True)
class TaskStream:
    """Ordered task specs realizing one of the FCIL/FDIL/FCDIL scenarios."""

    tasks: tuple[TaskSpec, ...]
    scenario: str

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.scenario not in SCENARIOS:
            raise ValidationError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if not self.tasks:
            raise ValidationError("task stream must contain at least one task")
        if self.scenario == "FCIL":
            if any(t.domain_id != 0 for t in self.tasks):
                raise ValidationError("FCIL tasks must all use domain 0")
            self._require_disjoint_classes()
        elif self.scenario == "FDIL":
            universe = self.tasks[0].class_set
            if any(t.class_set != universe for t in self.tasks):
                raise ValidationError("FDIL tasks must share one class universe")
            domains = [t.domain_id for t in self.tasks]
            if len(set(domains)) != len(domains):
                raise ValidationError("FDIL tasks must have pairwise distinct domain ids")

    def _require_disjoint_classes(self):
        seen: set[int] = set()
        for t in self.tasks:
            overlap = seen.intersection(t.class_set)
            if overlap:
                raise ValidationError(f"class sets must be disjoint, {sorted(overlap)} repeats")
            seen.update(t.class_set)

    @property
    def num_classes(self) -> int:
        return max(max(t.class_set) for t in self.tasks) + 1


@dataclass(frozen=True)
class ClientPartition:
    """Per-(task, client) training datasets; uids are unique within a task."""

    by_task_client: Mapping[tuple[int, int], Dataset]

    def __post_init__(self):
        frozen = dict(sorted(self.by_task_client.items()))
        object.__setattr__(self, "by_task_client", frozen)
        tasks: dict[int, set[int]] = {}
        for (t, c), ds in frozen.items():
            uids = ds.uids()
            dupes = tasks.setdefault(t, set()).intersection(uids)
            if dupes:
                raise ValidationError(
                    f"task {t}: uid(s) {sorted(dupes)[:3]} assigned to multiple clients"
                )
            tasks[t].update(uids)

    def clients(self) -> tuple[int, ...]:
        return tuple(sorted({c for (_, c) in self.by_task_client}))

    def tasks(self) -> tuple[int, ...]:
        return tuple(sorted({t for (t, _) in self.by_task_client}))

    def dataset_for(self, task: int, client: int) -> Dataset:
        return self.by_task_client[(task, client)]


def _lattice_means(num_classes: int, feature_dim: int) -> np.ndarray:
    base = 2
    while base**feature_dim < num_classes:
        base += 1
    means = np.zeros((num_classes, feature_dim))
    for k in range(num_classes):
        rest = k
        for j in range(feature_dim):
            means[k, j] = LATTICE_SPACING * (rest % base)
            rest //= base
            if rest == 0:
                break
    return means


def domain_shift_vector(domain_id: int, feature_dim: int) -> np.ndarray | None:
    """Constant mean translation of norm DOMAIN_SHIFT_NORM * domain_id."""
    if domain_id == 0:
        return None
    direction = np.full(feature_dim, 1.0 / np.sqrt(feature_dim))
    return DOMAIN_SHIFT_NORM * domain_id * direction


def make_gaussian_dataset(
    num_classes: int,
    per_class: int,
    feature_dim: int,
    domain_shift: np.ndarray | None = None,
    seed: int = 0,
) -> Dataset:
    """Per-class unit-covariance Gaussian blobs on the deterministic lattice.

    `domain_shift`, when given, is added to every class mean. Identical
    arguments produce bitwise-identical feature matrices.
    """
    if num_classes < 2:
        raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 1:
        raise ValidationError(f"per_class must be >= 1, got {per_class}")
    if feature_dim < 2:
        raise ValidationError(f"feature_dim must be >= 2, got {feature_dim}")
    means = _lattice_means(num_classes, feature_dim)
    if domain_shift is not None:
        shift = np.asarray(domain_shift, dtype=np.float64)
        if shift.shape != (feature_dim,):
            raise ValidationError(
                f"domain_shift must have shape ({feature_dim},), got {shift.shape}"
            )
        means = means + shift
    rng = seeded_rng("gaussian-dataset", seed)
    samples = []
    uid = 0
    for k in range(num_classes):
        feats = means[k] + rng.standard_normal((per_class, feature_dim))
        for i in range(per_class):
            samples.append(LabeledSample(uid=uid, features=feats[i], label=k))
            uid += 1
    return Dataset(tuple(samples), num_classes=num_classes, feature_dim=feature_dim)


def dirichlet_partition(
    ds: Dataset, num_clients: int, alpha: float, seed: int = 0
) -> dict[int, Dataset]:
    """Label-skew split: per class, client proportions ~ Dir(alpha * 1).

    Sample counts are apportioned by largest remainder, so the union over
    clients is exactly `ds`. A client left with zero samples overall receives
    one sample of the task's most frequent class, taken from whichever client
    holds the most of that class.
    """
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    if num_clients < 1:
        raise ValidationError(f"num_clients must be >= 1, got {num_clients}")
    rng = seeded_rng("dirichlet-partition", seed)
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(ds.samples):
        by_class.setdefault(s.label, []).append(i)

    assigned: dict[int, list[int]] = {c: [] for c in range(num_clients)}
    for label in sorted(by_class):
        idxs = np.array(by_class[label])
        idxs = idxs[rng.permutation(idxs.size)]
        proportions = rng.dirichlet(np.full(num_clients, alpha))
        counts = largest_remainder_round(proportions, idxs.size)
        start = 0
        for c in range(num_clients):
            assigned[c].extend(int(i) for i in idxs[start : start + counts[c]])
            start += counts[c]

    _reassign_to_empty_clients(ds, assigned)

    out = {}
    for c in range(num_clients):
        samples = tuple(ds.samples[i] for i in sorted(assigned[c], key=lambda i: ds.samples[i].uid))
        out[c] = Dataset(samples, num_classes=ds.num_classes, feature_dim=ds.feature_dim)
    return out


def _reassign_to_empty_clients(ds: Dataset, assigned: dict[int, list[int]]) -> None:
    hist = ds.class_histogram()
    if not hist.counts:
        return
    # most frequent class, ties broken by lowest class id
    top_class = max(hist.classes(), key=lambda y: (hist.get(y), -y))
    for c in sorted(assigned):
        if assigned[c]:
            continue
        donor = max(
            sorted(assigned),
            key=lambda d: (sum(1 for i in assigned[d] if ds.samples[i].label == top_class), -d),
        )
        candidates = [i for i in assigned[donor] if ds.samples[i].label == top_class]
        if not candidates:
            continue  # degenerate single-sample corner; client stays empty
        moved = candidates[0]
        assigned[donor].remove(moved)
        assigned[c].append(moved)


def build_task_stream(
    scenario: str, class_counts: Sequence[int], num_domains: int = 1, seed: int = 0
) -> TaskStream:
    """Assemble a TaskStream for one of the three incremental scenarios.

    FCIL: consecutive disjoint class blocks, single domain. FDIL: one class
    universe repeated across `num_domains` domains. FCDIL: disjoint class
    blocks with the domain advancing evenly across tasks. `seed` is accepted
    for interface uniformity; current layouts are fully deterministic.
    """
    del seed
    counts = [int(n) for n in class_counts]
    if not counts or any(n < 1 for n in counts):
        raise ValidationError(f"class_counts must be positive, got {class_counts}")
    if num_domains < 1:
        raise ValidationError(f"num_domains must be >= 1, got {num_domains}")
    if scenario == "FCIL":
        if num_domains != 1:
            raise ValidationError("FCIL requires num_domains == 1")
        return TaskStream(tuple(_cil_tasks(counts, lambda i, n: 0)), "FCIL")
    if scenario == "FDIL":
        if len(set(counts)) != 1:
            raise ValidationError(
                f"FDIL requires a single class universe, got class_counts {counts}"
            )
        universe = tuple(range(counts[0]))
        tasks = tuple(
            TaskSpec(task_index=i, class_set=universe, domain_id=i) for i in range(num_domains)
        )
        return TaskStream(tasks, "FDIL")
    if scenario == "FCDIL":
        n_tasks = len(counts)
        return TaskStream(
            tuple(_cil_tasks(counts, lambda i, n: (i * num_domains) // n)), "FCDIL"
        )
    raise ValidationError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")


def _cil_tasks(counts: list[int], domain_rule) -> list[TaskSpec]:
    tasks = []
    next_class = 0
    for i, n in enumerate(counts):
        tasks.append(
            TaskSpec(
                task_index=i,
                class_set=tuple(range(next_class, next_class + n)),
                domain_id=domain_rule(i, len(counts)),
            )
        )
        next_class += n
    return tasks


@dataclass(frozen=True)
class ExperimentData:
    """Everything an experiment run consumes: stream, per-client training data,
    held-out per-task test sets, and the full per-task training sets."""

    stream: TaskStream
    partition: ClientPartition
    test_sets: Mapping[int, Dataset]
    train_sets: Mapping[int, Dataset]


def build_experiment_data(
    stream: TaskStream,
    num_clients: int,
    per_class: int,
    feature_dim: int,
    alpha: float,
    seed: int,
) -> ExperimentData:
    """Realize a task stream as concrete datasets and a non-IID partition.

    Per task: draw fresh blobs for the whole class universe under the task's
    domain shift, keep the task's classes, relabel uids onto the task's uid
    stride, hold out a per-class test fraction, then Dirichlet-partition the
    training remainder across clients.
    """
    universe = stream.num_classes
    by_task_client: dict[tuple[int, int], Dataset] = {}
    test_sets: dict[int, Dataset] = {}
    train_sets: dict[int, Dataset] = {}
    for task in stream.tasks:
        full = make_gaussian_dataset(
            num_classes=universe,
            per_class=per_class,
            feature_dim=feature_dim,
            domain_shift=domain_shift_vector(task.domain_id, feature_dim),
            seed=derive_seed(seed, "task-data", task.task_index),
        )
        offset = task.task_index * TASK_UID_STRIDE
        task_samples = tuple(
            LabeledSample(
                uid=s.uid + offset, features=s.features, label=s.label, domain=task.domain_id
            )
            for s in full.samples
            if s.label in task.class_set
        )
        train, test = _split_test(task_samples, universe, feature_dim, seed, task.task_index)
        test_sets[task.task_index] = test
        train_sets[task.task_index] = train
        for c, ds in dirichlet_partition(
            train, num_clients, alpha, seed=derive_seed(seed, "partition", task.task_index)
        ).items():
            by_task_client[(task.task_index, c)] = ds
    return ExperimentData(
        stream=stream,
        partition=ClientPartition(by_task_client),
        test_sets=test_sets,
        train_sets=train_sets,
    )


def _split_test(
    samples: tuple[LabeledSample, ...],
    num_classes: int,
    feature_dim: int,
    seed: int,
    task_index: int,
) -> tuple[Dataset, Dataset]:
    rng = seeded_rng(seed, "test-split", task_index)
    by_class: dict[int, list[LabeledSample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    train: list[LabeledSample] = []
    test: list[LabeledSample] = []
    for label in sorted(by_class):
        group = by_class[label]
        order = rng.permutation(len(group))
        n_test = max(1, round(TEST_FRACTION * len(group)))
        picked = set(order[:n_test].tolist())
        for i, s in enumerate(group):
            (test if i in picked else train).append(s)
    key = lambda s: s.uid
    return (
        Dataset(tuple(sorted(train, key=key)), num_classes, feature_dim),
        Dataset(tuple(sorted(test, key=key)), num_classes, feature_dim),
    )


def partition_histograms(partition: ClientPartition, task: int) -> dict[int, ClassHistogram]:
    """Per-client class histograms of one task's training data."""
    return {
        c: partition.dataset_for(task, c).class_histogram()
        for c in partition.clients()
        if (task, c) in partition.by_task_client
    }
