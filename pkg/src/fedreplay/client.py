"""Per-client continual learning.

Each client keeps a personal information model v alongside its working
parameters. When a task finishes, v is refined for a few iterations with a
momentum pull toward the global model,

    v <- v - eta * sum_i grad L(v; x_i, y_i) + q(lambda) * (v - w_g),
    q(lambda) = (1 - lambda) / (2 * lambda),

while every candidate sample is scored by the squared norm of its own
gradient after each iteration; the per-class exemplar quotas are then filled
with the highest-scoring samples. Local training minimizes cross-entropy
plus a KL pull toward the round's frozen global model plus the weighted
output-magnitude penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    ClassHistogram,
    Dataset,
    DivergenceError,
    FederationConfig,
    LabeledSample,
    ModelParams,
    ValidationError,
    param_axpy,
    seeded_rng,
)
from .mlp import MlpSpec, backward, forward, per_sample_grad_sqnorms
from .allocator import MemoryPlan


@dataclass
class ClientState:
    """Mutable per-client runtime state, owned by one worker per round."""

    client_id: int
    params: ModelParams
    info_model: ModelParams
    current_data: Dataset
    cache: tuple[LabeledSample, ...] = ()
    histogram: ClassHistogram = field(default_factory=lambda: ClassHistogram({}))

    def __post_init__(self):
        self.cache = tuple(self.cache)
        if not self.histogram.counts:
            self.histogram = self.current_data.class_histogram()

    def replay_dataset(self, num_classes: int) -> Dataset:
        """Current-task data joined with the exemplar cache (the training set)."""
        return Dataset(
            self.current_data.samples + self.cache,
            num_classes=num_classes,
            feature_dim=self.current_data.feature_dim,
        )


@dataclass(frozen=True)
class SampleScore:
    """Mean squared gradient norm of one sample across the scoring iterations."""

    uid: int
    label: int
    mean_sq_grad_norm: float

    def __post_init__(self):
        if not np.isfinite(self.mean_sq_grad_norm) or self.mean_sq_grad_norm < 0:
            raise ValidationError(
                f"score for uid {self.uid} must be finite and >= 0, "
                f"got {self.mean_sq_grad_norm}"
            )


def momentum_coefficient(lam: float) -> float:
    """q(lambda) = (1 - lambda) / (2 * lambda) for lambda in (0, 1)."""
    if not 0.0 < lam < 1.0:
        raise ValidationError(f"lambda must lie strictly in (0, 1), got {lam}")
    return (1.0 - lam) / (2.0 * lam)


def update_info_model(
    info_model: ModelParams,
    prev_global: ModelParams,
    data: Dataset,
    spec: MlpSpec,
    eta: float,
    lam: float,
    iters: int,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[ModelParams, list[SampleScore]]:
    """Run the momentum-regularized information-model update and score samples.

    Each iteration takes one seeded mini-batch step (gradients are summed
    over the batch, not averaged) followed by a full scoring pass; scores are
    averaged over the iterations. Raises DivergenceError with the iteration
    index if the update produces non-finite parameters.
    """
    if iters < 1:
        raise ValidationError(f"iters must be >= 1, got {iters}")
    if len(data) == 0:
        raise ValidationError("info-model update requires non-empty data")
    q = momentum_coefficient(lam)
    x = data.feature_matrix
    y = data.label_vector
    n = len(data)
    v = info_model
    sq_sums = np.zeros(n)
    order = rng.permutation(n)
    cursor = 0
    for k in range(iters):
        if cursor >= n:
            order = rng.permutation(n)
            cursor = 0
        batch = order[cursor : cursor + batch_size]
        cursor += batch_size
        _, grad = backward(v, spec, x[batch], y[batch], None, 0.0)
        grad_sum = grad.values * batch.size  # backward returns the batch mean
        new_values = v.values - eta * grad_sum + q * (v.values - prev_global.values)
        if not np.all(np.isfinite(new_values)):
            raise DivergenceError("information-model update diverged", iteration=k)
        v = ModelParams(new_values, v.shapes)
        sq_sums += per_sample_grad_sqnorms(v, spec, x, y)
    scores = [
        SampleScore(uid=s.uid, label=s.label, mean_sq_grad_norm=float(sq_sums[i] / iters))
        for i, s in enumerate(data.samples)
    ]
    return v, scores


def select_exemplars(
    scores: list[SampleScore],
    quotas: dict[int, int],
    data: Dataset,
) -> tuple[list[LabeledSample], dict[int, int]]:
    """Per class, keep the quota-many highest-scoring samples.

    Ties break by ascending uid. Returns the selected samples (classes in
    ascending order) and the per-class shortfall where availability fell
    below the quota.
    """
    by_uid = {s.uid: s for s in data.samples}
    for sc in scores:
        if sc.uid not in by_uid:
            raise ValidationError(f"score references unknown uid {sc.uid}")
    if any(q < 0 for q in quotas.values()):
        raise ValidationError("quotas must be non-negative")
    per_class: dict[int, list[SampleScore]] = {}
    for sc in scores:
        per_class.setdefault(sc.label, []).append(sc)
    selected: list[LabeledSample] = []
    shortfall: dict[int, int] = {}
    for label in sorted(quotas):
        quota = quotas[label]
        if quota == 0:
            continue
        candidates = sorted(
            per_class.get(label, ()), key=lambda sc: (-sc.mean_sq_grad_norm, sc.uid)
        )
        take = min(quota, len(candidates))
        selected.extend(by_uid[sc.uid] for sc in candidates[:take])
        if take < quota:
            shortfall[label] = quota - take
    return selected, shortfall


def _batch_slices(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def local_train(
    state: ClientState,
    global_params: ModelParams,
    spec: MlpSpec,
    config: FederationConfig,
    task_index: int,
    round_index: int,
) -> ModelParams:
    """Mini-batch SGD on current data plus cache with the composite objective.

    The round's global model serves as the frozen KL teacher, except on the
    very first round of the first task where no trained global exists yet.
    Batch order is a pure function of (seed, client, task, round, epoch).
    """
    replay = state.replay_dataset(spec.num_classes)
    if len(replay) == 0:
        raise ValidationError(f"client {state.client_id} has no training data")
    x = replay.feature_matrix
    y = replay.label_vector
    use_teacher = not (task_index == 0 and round_index == 0)
    w = global_params
    for epoch in range(config.local_epochs):
        rng = seeded_rng(
            config.seed, "local-train", state.client_id, task_index, round_index, epoch
        )
        order = rng.permutation(len(replay))
        for batch in _batch_slices(len(replay), config.batch_size, order):
            xb, yb = x[batch], y[batch]
            teacher_logits = forward(global_params, spec, xb) if use_teacher else None
            breakdown, grad = backward(w, spec, xb, yb, teacher_logits, config.mg_weight)
            if not np.isfinite(breakdown.total):
                raise DivergenceError(
                    f"client {state.client_id} loss diverged", iteration=epoch
                )
            w = param_axpy(-config.train_lr, grad, w)
    return w


def refresh_cache(
    state: ClientState,
    plan: MemoryPlan,
    prev_global: ModelParams,
    spec: MlpSpec,
    config: FederationConfig,
    completed_task: int,
) -> ClientState:
    """Rebuild the exemplar cache from the just-finished task's replay pool.

    Runs the information-model update on current data plus the old cache,
    scores every sample, and replaces the cache wholesale with the plan's
    per-class selection for this client.
    """
    pool = state.replay_dataset(spec.num_classes)
    quotas = plan.quotas_for(state.client_id)
    if not quotas or len(pool) == 0:
        state.cache = ()
        return state
    rng = seeded_rng(config.seed, "info-model", state.client_id, completed_task)
    new_info, scores = update_info_model(
        state.info_model,
        prev_global,
        pool,
        spec,
        eta=config.info_lr,
        lam=config.momentum,
        iters=config.info_iters,
        batch_size=config.batch_size,
        rng=rng,
    )
    selected, _ = select_exemplars(scores, quotas, pool)
    state.info_model = new_info
    state.cache = tuple(selected)
    return state
