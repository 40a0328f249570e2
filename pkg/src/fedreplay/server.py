"""Federation orchestration: round/task loops, FedAvg aggregation, allocation.

One communication round distributes the global parameters, trains every
client locally, and aggregates the results weighted by replay-inclusive
sample counts. At a task boundary the server receives the final local
parameters and current-task class histograms, builds the next memory plan,
lets every client rebuild its exemplar cache, expands the classifier head
for any new classes, and hands out the next task's data.

Clients may train concurrently: every per-client random stream is a pure
function of (seed, client id, task, round), and aggregation always walks
clients in ascending id order, so parallel and sequential execution produce
bitwise-identical results.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .allocator import MemoryPlan, build_memory_plan
from .client import ClientState, local_train, refresh_cache
from .core import (
    ClassHistogram,
    Dataset,
    FederationConfig,
    ModelParams,
    ValidationError,
    seeded_rng,
)
from .mlp import MlpSpec, expand_head, init_params
from .report import ExperimentReport, estimate_costs, evaluate, make_report, summarize
from .scenarios import ClientPartition, TaskSpec, TaskStream


@dataclass
class GlobalState:
    """Server-side view of the federation."""

    params: ModelParams
    spec: MlpSpec
    task_index: int = 0
    round_index: int = 0
    plan_history: list[MemoryPlan] = field(default_factory=list)


def fedavg_aggregate(updates: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    """Sample-count-weighted parameter mean, reduced in the given (ascending
    client id) order."""
    if not updates:
        raise ValidationError("fedavg_aggregate requires at least one update")
    shapes = updates[0][0].shapes
    total = sum(n for _, n in updates)
    if total <= 0:
        raise ValidationError(f"total sample count must be positive, got {total}")
    acc = np.zeros(updates[0][0].size)
    for params, n in updates:
        if params.shapes != shapes:
            raise ValidationError("aggregation inputs must share one shape")
        acc += (n / total) * params.values
    return ModelParams(acc, shapes)


def run_round(
    global_state: GlobalState,
    clients: list[ClientState],
    config: FederationConfig,
    parallel: bool = False,
) -> GlobalState:
    """Distribute the global model, train every client, aggregate, advance r."""
    spec = global_state.spec
    t, r = global_state.task_index, global_state.round_index
    ordered = sorted(clients, key=lambda st: st.client_id)

    def train(state: ClientState) -> tuple[ModelParams, int]:
        trained = local_train(state, global_state.params, spec, config, t, r)
        return trained, len(state.current_data) + len(state.cache)

    if parallel and len(ordered) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=min(8, len(ordered))) as pool:
            results = list(pool.map(train, ordered))
    else:
        results = [train(state) for state in ordered]

    for state, (trained, _) in zip(ordered, results):
        state.params = trained
    global_state.params = fedavg_aggregate(results)
    global_state.round_index += 1
    return global_state


def task_boundary(
    global_state: GlobalState,
    clients: list[ClientState],
    next_task: TaskSpec,
    next_data: Mapping[int, Dataset],
    config: FederationConfig,
    last_distributed: ModelParams,
) -> GlobalState:
    """Allocate exemplar memory, refresh caches, expand the head, load data.

    The allocation's model-space index compares each client's final local
    parameters against `last_distributed`, the global model they trained
    from in the final round; the cache-refresh information models pull
    toward the freshly aggregated global.
    """
    ordered = sorted(clients, key=lambda st: st.client_id)
    local_params = {st.client_id: st.params for st in ordered}
    histograms = {st.client_id: st.histogram for st in ordered}
    pool_histograms = {
        st.client_id: ClassHistogram.from_labels(
            [s.label for s in st.current_data.samples] + [s.label for s in st.cache]
        )
        for st in ordered
    }
    plan = build_memory_plan(
        local_params, last_distributed, histograms, config, pool_histograms=pool_histograms
    )

    for state in ordered:
        refresh_cache(
            state, plan, global_state.params, global_state.spec, config,
            completed_task=global_state.task_index,
        )

    old_spec = global_state.spec
    new_head = max(max(next_task.class_set) + 1, old_spec.num_classes)
    global_state.params, global_state.spec = expand_head(
        global_state.params, old_spec, new_head
    )
    for state in ordered:
        state.params, _ = expand_head(state.params, old_spec, new_head)
        state.info_model, _ = expand_head(state.info_model, old_spec, new_head)
        state.current_data = next_data[state.client_id]
        state.histogram = state.current_data.class_histogram()

    global_state.plan_history.append(plan)
    global_state.task_index += 1
    global_state.round_index = 0
    return global_state


def _cumulative_test(test_sets: Mapping[int, Dataset], upto: int) -> Dataset:
    samples: tuple = ()
    first = test_sets[0]
    for t in range(upto + 1):
        samples = samples + test_sets[t].samples
    return Dataset(samples, num_classes=first.num_classes, feature_dim=first.feature_dim)


def run_experiment(
    stream: TaskStream,
    partition: ClientPartition,
    test_sets: Mapping[int, Dataset],
    config: FederationConfig,
    config_echo: Mapping[str, object] | None = None,
    parallel: bool = False,
) -> ExperimentReport:
    """Execute every task and round; evaluate cumulatively after each task."""
    clients_ids = partition.clients()
    if len(clients_ids) != config.num_clients:
        raise ValidationError(
            f"partition covers {len(clients_ids)} clients, config expects {config.num_clients}"
        )
    feature_dim = partition.dataset_for(0, clients_ids[0]).feature_dim
    head = max(stream.tasks[0].class_set) + 1
    spec = MlpSpec(feature_dim, head)
    params = init_params(spec, seeded_rng(config.seed, "global-init"))
    global_state = GlobalState(params=params, spec=spec)
    clients = [
        ClientState(
            client_id=c,
            params=params,
            info_model=params,
            current_data=partition.dataset_for(0, c),
        )
        for c in clients_ids
    ]

    overall: list[float] = []
    matrix: dict[tuple[int, int], float] = {}
    for task in stream.tasks:
        last_distributed = global_state.params
        for _ in range(config.rounds_per_task):
            last_distributed = global_state.params
            run_round(global_state, clients, config, parallel=parallel)
        t = task.task_index
        overall.append(
            evaluate(global_state.params, global_state.spec, _cumulative_test(test_sets, t))
        )
        for tau in range(t + 1):
            matrix[(t, tau)] = evaluate(global_state.params, global_state.spec, test_sets[tau])
        if t + 1 < len(stream.tasks):
            next_task = stream.tasks[t + 1]
            next_data = {c: partition.dataset_for(t + 1, c) for c in clients_ids}
            task_boundary(global_state, clients, next_task, next_data, config, last_distributed)

    a_avg, a_last = summarize(overall)
    cost = estimate_costs(
        num_clients=config.num_clients,
        rounds=config.rounds_per_task * len(stream.tasks),
        info_iters=config.info_iters,
        param_count=global_state.spec.param_count,
        dataset_sizes=[
            sum(len(partition.dataset_for(t, c)) for t in partition.tasks())
            for c in clients_ids
        ],
        num_classes=stream.num_classes,
    )
    return make_report(
        scenario=stream.scenario,
        seed=config.seed,
        per_task_overall=overall,
        accuracy_matrix=matrix,
        a_avg=a_avg,
        a_last=a_last,
        plans=global_state.plan_history,
        cost_estimate=cost,
        config_echo=dict(config_echo or {}),
    )
