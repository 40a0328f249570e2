"""Server-side dynamic apportionment of the global exemplar-memory pool.

Client-level split: each client's weight is the sum of a model-space
contribution index b (normalized parameter deviation from the previous
global model) and a data-space index d (normalized mean class share). The
pool is divided proportionally to these weights subject to per-client
bounds [m_min, m_max]; the bounded proportional solution is the water-
filling fixpoint x_c = clip(mu * w_c, m_min, m_max) with the multiplier mu
chosen so the total hits min(pool, C * m_max). Class-level split: Hamilton
rounding of the mixed local/global class-share scores, with quotas capped
at the client's availability and the surplus redistributed by residual
score.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import (
    ClassHistogram,
    FederationConfig,
    ModelParams,
    ValidationError,
    largest_remainder_round,
    param_axpy,
    param_l2_norm,
)

_INDEX_SUM_TOL = 1e-9


@dataclass(frozen=True)
class ContributionIndices:
    """Per-client model-space (b) and data-space (d) contribution shares."""

    b: Mapping[int, float]
    d: Mapping[int, float]

    def __post_init__(self):
        b = {int(c): float(v) for c, v in sorted(self.b.items())}
        d = {int(c): float(v) for c, v in sorted(self.d.items())}
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "d", d)
        if set(b) != set(d):
            raise ValidationError("b and d must cover the same clients")
        if not b:
            raise ValidationError("contribution indices require at least one client")
        for name, mapping in (("b", b), ("d", d)):
            if any(v < 0 for v in mapping.values()):
                raise ValidationError(f"{name} entries must be non-negative")
            total = sum(mapping.values())
            if abs(total - 1.0) > _INDEX_SUM_TOL:
                raise ValidationError(f"{name} must sum to 1 within {_INDEX_SUM_TOL}, got {total}")


@dataclass(frozen=True)
class MemoryPlan:
    """Integer exemplar quotas per client and per (client, class).

    `shortfall[c]` is the part of client c's quota that exceeded its
    available samples and could not be placed on any class; per-class quotas
    plus the shortfall always reconstruct the client quota.
    """

    per_client: Mapping[int, int]
    per_class: Mapping[tuple[int, int], int]
    shortfall: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        per_client = {int(c): int(v) for c, v in sorted(self.per_client.items())}
        per_class = {
            (int(c), int(y)): int(v) for (c, y), v in sorted(self.per_class.items())
        }
        shortfall = {c: int(self.shortfall.get(c, 0)) for c in per_client}
        object.__setattr__(self, "per_client", per_client)
        object.__setattr__(self, "per_class", per_class)
        object.__setattr__(self, "shortfall", shortfall)
        if any(v < 0 for v in per_client.values()) or any(v < 0 for v in per_class.values()):
            raise ValidationError("memory quotas must be non-negative")
        for c in per_class:
            if c[0] not in per_client:
                raise ValidationError(f"per_class references unknown client {c[0]}")
        for c, quota in per_client.items():
            placed = sum(v for (cc, _), v in per_class.items() if cc == c)
            if placed + shortfall[c] != quota:
                raise ValidationError(
                    f"client {c}: class quotas ({placed}) + shortfall ({shortfall[c]}) "
                    f"!= client quota ({quota})"
                )

    @property
    def total(self) -> int:
        return sum(self.per_client.values())

    def quotas_for(self, client: int) -> dict[int, int]:
        return {y: v for (c, y), v in self.per_class.items() if c == client}


def model_contribution(
    local_params: Mapping[int, ModelParams], prev_global: ModelParams
) -> dict[int, float]:
    """b_c: each client's share of the total parameter deviation from the
    previous global model. Falls back to uniform when every deviation is 0."""
    if not local_params:
        raise ValidationError("model_contribution requires at least one client")
    deviations = {}
    for c in sorted(local_params):
        delta = param_axpy(-1.0, prev_global, local_params[c])
        deviations[c] = param_l2_norm(delta)
    total = sum(deviations.values())
    if total == 0.0:
        return {c: 1.0 / len(deviations) for c in deviations}
    return {c: v / total for c, v in deviations.items()}


def data_contribution(histograms: Mapping[int, ClassHistogram]) -> dict[int, float]:
    """d_c: normalized sum over classes of the client's share of that class.

    Classes with a zero global count are skipped.
    """
    if not histograms:
        raise ValidationError("data_contribution requires at least one client")
    clients = sorted(histograms)
    global_counts: dict[int, int] = {}
    for c in clients:
        for y, n in histograms[c].counts.items():
            global_counts[y] = global_counts.get(y, 0) + n
    raw = {}
    for c in clients:
        acc = 0.0
        for y in sorted(global_counts):
            n_y = global_counts[y]
            if n_y == 0:
                continue
            acc += histograms[c].get(y) / n_y
        raw[c] = acc
    denom = sum(raw.values())
    if denom == 0.0:
        raise ValidationError("data_contribution requires at least one sample overall")
    return {c: v / denom for c, v in raw.items()}


def _bounded_proportional_shares(
    weights: dict[int, float], target: int, m_min: int, m_max: int
) -> dict[int, float]:
    """Fractional water-filling solution: x_c = clip(mu * w_c, m_min, m_max)
    with mu such that the shares sum to `target`."""
    clients = sorted(weights)
    positive = [c for c in clients if weights[c] > 0.0]
    pinned = m_min * (len(clients) - len(positive))
    if not positive:
        return {c: target / len(clients) for c in clients}

    def total_at(mu: float) -> float:
        return pinned + sum(min(max(mu * weights[c], m_min), m_max) for c in positive)

    breakpoints = sorted(
        {0.0}
        | {m_min / weights[c] for c in positive}
        | {m_max / weights[c] for c in positive}
    )
    lo = 0.0
    hi = breakpoints[-1]
    for bp in breakpoints:
        if total_at(bp) >= target:
            hi = bp
            break
        lo = bp
    # linear inside [lo, hi]; identify the active set at the midpoint
    mid = 0.5 * (lo + hi)
    fixed = pinned
    slope = 0.0
    for c in positive:
        v = mid * weights[c]
        if v <= m_min:
            fixed += m_min
        elif v >= m_max:
            fixed += m_max
        else:
            slope += weights[c]
    mu = lo if slope == 0.0 else min(max((target - fixed) / slope, lo), hi)
    shares = {
        c: (min(max(mu * weights[c], m_min), m_max) if weights[c] > 0.0 else float(m_min))
        for c in clients
    }
    # Zero-weight clients sit at m_min, which can leave pool capacity unused
    # even though every positive-weight client saturated at m_max. Pool
    # conservation wins: spread the residual equally over the zero-weight set.
    gap = target - sum(shares.values())
    if gap > 1e-9:
        zeros = [c for c in clients if weights[c] == 0.0]
        sub_target = int(round(gap + len(zeros) * m_min))
        sub = _bounded_proportional_shares(
            {c: 1.0 for c in zeros}, sub_target, m_min, m_max
        )
        shares.update(sub)
    return shares


def _round_bounded(shares: dict[int, float], target: int, m_min: int, m_max: int) -> dict[int, int]:
    """Largest-remainder rounding that keeps every quota inside [m_min, m_max]
    and the total exactly at `target`."""
    keys = sorted(shares)
    clipped = np.array([min(max(shares[c], float(m_min)), float(m_max)) for c in keys])
    quotas = np.floor(clipped).astype(np.int64)
    leftover = int(target - quotas.sum())
    if leftover < 0:
        raise ValidationError("internal rounding error: floors exceed target")
    order = np.argsort(-(clipped - quotas), kind="stable")
    while leftover > 0:
        progressed = False
        for idx in order:
            if leftover == 0:
                break
            if quotas[idx] < m_max:
                quotas[idx] += 1
                leftover -= 1
                progressed = True
        if not progressed:
            raise ValidationError("internal rounding error: no capacity below m_max")
    return {c: int(q) for c, q in zip(keys, quotas)}


def client_memory_split(
    indices: ContributionIndices, pool: int, m_min: int, m_max: int
) -> dict[int, int]:
    """Divide the pool across clients proportionally to b + d within bounds.

    The integer quotas sum to min(pool, C * m_max); when the cap binds, the
    difference to `pool` is an unallocated surplus, not an error.
    """
    clients = sorted(indices.b)
    n = len(clients)
    if m_min > m_max:
        raise ValidationError(f"infeasible bounds: m_min ({m_min}) > m_max ({m_max})")
    if n * m_min > pool:
        raise ValidationError(
            f"infeasible bounds: num_clients * m_min ({n * m_min}) > pool ({pool})"
        )
    target = min(pool, n * m_max)
    weights = {c: indices.b[c] + indices.d[c] for c in clients}
    shares = _bounded_proportional_shares(weights, target, m_min, m_max)
    return _round_bounded(shares, target, m_min, m_max)


def class_memory_split(
    client_hist: ClassHistogram,
    global_hist: ClassHistogram,
    a: float,
    m_c: int,
) -> tuple[dict[int, int], int]:
    """Split one client's quota m_c across its classes.

    Score per class: (1 - a) * local share + a * global share, normalized,
    then Hamilton-rounded. Quotas above the client's own count for a class
    are capped and the surplus re-apportioned over the uncapped classes by
    residual score. Returns (quotas, shortfall); the shortfall is m_c minus
    what availability admitted.
    """
    if not 0.0 <= a <= 1.0:
        raise ValidationError(f"mix weight a must lie in [0, 1], got {a}")
    if m_c < 0:
        raise ValidationError(f"client quota must be >= 0, got {m_c}")
    classes = [y for y in client_hist.classes() if client_hist.get(y) > 0]
    for y in classes:
        if global_hist.get(y) <= 0:
            raise ValidationError(f"class {y} present at client but absent globally")
    if not classes:
        return {}, m_c
    n_c = client_hist.total
    scores = {
        y: (1.0 - a) * client_hist.get(y) / n_c + a * client_hist.get(y) / global_hist.get(y)
        for y in classes
    }
    norm = sum(scores[y] for y in classes)
    scores = {y: s / norm for y, s in scores.items()}

    capped: dict[int, int] = {}
    open_classes = list(classes)
    remaining = m_c
    while True:
        if not open_classes or remaining == 0:
            break
        quota_arr = largest_remainder_round([scores[y] for y in open_classes], remaining)
        quotas = dict(zip(open_classes, (int(q) for q in quota_arr)))
        overflow = [y for y in open_classes if quotas[y] > client_hist.get(y)]
        if not overflow:
            capped.update(quotas)
            remaining = 0
            break
        for y in overflow:
            capped[y] = client_hist.get(y)
            remaining -= capped[y]
            open_classes.remove(y)
    shortfall = m_c - sum(capped.values())
    result = {y: capped.get(y, 0) for y in classes}
    return result, shortfall


def uniform_class_split(client_hist: ClassHistogram, m_c: int) -> dict[int, int]:
    """Fixed-equal baseline: split m_c evenly over the client's present classes."""
    classes = [y for y in client_hist.classes() if client_hist.get(y) > 0]
    if not classes:
        return {}
    quotas = largest_remainder_round(np.ones(len(classes)), m_c)
    return dict(zip(classes, (int(q) for q in quotas)))


def _merge_histograms(
    histograms: Mapping[int, ClassHistogram], clients: list[int]
) -> ClassHistogram:
    merged: dict[int, int] = {}
    for c in clients:
        for y, n in histograms[c].counts.items():
            merged[y] = merged.get(y, 0) + n
    return ClassHistogram(merged)


def build_memory_plan(
    local_params: Mapping[int, ModelParams],
    prev_global: ModelParams,
    histograms: Mapping[int, ClassHistogram],
    config: FederationConfig,
    pool_histograms: Mapping[int, ClassHistogram] | None = None,
) -> MemoryPlan:
    """Compose the client- and class-level splits into a full MemoryPlan.

    `histograms` (current-task class counts) drive the data-space index.
    `pool_histograms`, when given, describe each client's full replay pool
    (current data plus the old cache) and define the class support and
    availability for the class-level split, so exemplars of classes from
    every earlier task stay eligible; they default to `histograms`.

    In fixed_equal mode the contribution indices are bypassed entirely:
    every client receives floor(pool / C) slots split evenly over its
    selectable classes, mirroring fixed-allocation replay baselines.
    """
    clients = sorted(local_params)
    if sorted(histograms) != clients:
        raise ValidationError("local_params and histograms must cover the same clients")
    if pool_histograms is None:
        pool_histograms = histograms
    elif sorted(pool_histograms) != clients:
        raise ValidationError("pool_histograms must cover the same clients")

    if config.allocation_mode == "fixed_equal":
        quota = config.pool // config.num_clients
        per_client = {c: quota for c in clients}
        per_class = {}
        for c in clients:
            split = uniform_class_split(pool_histograms[c], quota)
            for y, q in split.items():
                per_class[(c, y)] = q
        shortfall = {
            c: per_client[c] - sum(q for (cc, _), q in per_class.items() if cc == c)
            for c in clients
        }
        return MemoryPlan(per_client, per_class, shortfall)

    b = model_contribution(local_params, prev_global)
    d = data_contribution(histograms)
    indices = ContributionIndices(b=b, d=d)
    per_client = client_memory_split(indices, config.pool, config.m_min, config.m_max)

    global_pool_hist = _merge_histograms(pool_histograms, clients)
    per_class = {}
    shortfall = {}
    for c in clients:
        quotas, short = class_memory_split(
            pool_histograms[c], global_pool_hist, config.mix, per_client[c]
        )
        shortfall[c] = short
        for y, q in quotas.items():
            per_class[(c, y)] = q
    return MemoryPlan(per_client, per_class, shortfall)
