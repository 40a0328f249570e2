"""Minimal MLP classifier with hand-written forward/backward passes.

Hidden layers are rectified-linear, the head is identity. The composite
training objective is

    total = ce + kl + delta * mg

where `ce` is mean softmax cross-entropy, `kl` is the mean KL divergence
from a frozen teacher's softmax to the student's, and `mg` is the output
magnitude penalty log(1 + ||logits||^2) / batch_rows (the squared norm is
taken over the whole batch logit matrix so the term's scale does not depend
on batch size).

The head-layer matmul deliberately goes through np.einsum(optimize=False):
its per-element accumulation order does not depend on the number of output
columns, which keeps old-class logits bitwise identical when the head is
expanded with zero-initialized rows for new classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    LayerShape,
    ModelParams,
    ShapeMismatchError,
    ValidationError,
)

DEFAULT_HIDDEN = (32, 16)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture: feature_dim -> hidden widths -> num_classes head."""

    feature_dim: int
    num_classes: int
    hidden: tuple[int, ...] = DEFAULT_HIDDEN

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.feature_dim < 1 or self.num_classes < 1:
            raise ValidationError("feature_dim and num_classes must be >= 1")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValidationError(f"hidden widths must be non-empty and >= 1, got {self.hidden}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.feature_dim, *self.hidden, self.num_classes)

    def param_shapes(self) -> tuple[LayerShape, ...]:
        dims = self.layer_dims
        return tuple(
            LayerShape(rows=dims[i], cols=dims[i + 1], bias=dims[i + 1])
            for i in range(len(dims) - 1)
        )

    @property
    def param_count(self) -> int:
        return sum(s.size for s in self.param_shapes())


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term loss values; total = ce + kl + delta * mg."""

    ce: float
    kl: float
    mg: float
    total: float


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ModelParams:
    """He-normal weights, zero biases."""
    chunks = []
    for shape in spec.param_shapes():
        std = np.sqrt(2.0 / shape.rows)
        chunks.append(rng.normal(0.0, std, size=shape.rows * shape.cols))
        chunks.append(np.zeros(shape.bias))
    return ModelParams(np.concatenate(chunks), spec.param_shapes())


def _check_batch(spec: MlpSpec, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.feature_dim:
        raise ShapeMismatchError((x.shape,), ((-1, spec.feature_dim),))
    return x


def _check_params(params: ModelParams, spec: MlpSpec) -> None:
    if params.shapes != spec.param_shapes():
        raise ShapeMismatchError(params.shapes, spec.param_shapes())


def _forward_cached(params: ModelParams, spec: MlpSpec, x: np.ndarray):
    """Returns (logits, layer inputs, hidden pre-activations)."""
    layers = params.layer_arrays()
    inputs = [x]
    pre = []
    a = x
    for w, b in layers[:-1]:
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0)
        inputs.append(a)
    w_head, b_head = layers[-1]
    logits = np.einsum("ij,jk->ik", a, w_head, optimize=False) + b_head
    return logits, inputs, pre


def forward(params: ModelParams, spec: MlpSpec, batch: np.ndarray) -> np.ndarray:
    """Logits of shape (batch_rows, num_classes)."""
    x = _check_batch(spec, batch)
    _check_params(params, spec)
    logits, _, _ = _forward_cached(params, spec, x)
    return logits


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(z))


def loss_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient (softmax - onehot) / rows."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rows = logits.shape[0]
    if labels.shape != (rows,):
        raise ShapeMismatchError((labels.shape,), ((rows,),))
    if rows == 0:
        raise ValidationError("cross-entropy over an empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValidationError(
            f"labels must lie in 0..{logits.shape[1] - 1}, got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    logp = _log_softmax(logits)
    value = float(-logp[np.arange(rows), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(rows), labels] -= 1.0
    return value, grad / rows


def loss_mg(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Output-magnitude penalty log(1 + ||logits||^2) / rows and its gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] == 0:
        raise ValidationError("magnitude penalty over an empty batch")
    rows = logits.shape[0]
    flat = logits.reshape(-1)
    sq = float(np.dot(flat, flat))
    value = float(np.log1p(sq)) / rows
    grad = (2.0 / (rows * (1.0 + sq))) * logits
    return value, grad


def loss_kl(teacher_logits: np.ndarray, student_logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean KL(softmax(teacher) || softmax(student)); teacher is constant."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeMismatchError((t.shape,), (s.shape,))
    if t.shape[0] == 0:
        raise ValidationError("KL divergence over an empty batch")
    rows = t.shape[0]
    log_p = _log_softmax(t)
    log_s = _log_softmax(s)
    p = np.exp(log_p)
    value = float((p * (log_p - log_s)).sum(axis=1).mean())
    value = max(value, 0.0)  # guard against -1e-17 style rounding
    grad = (np.exp(log_s) - p) / rows
    return value, grad


def backward(
    params: ModelParams,
    spec: MlpSpec,
    batch: np.ndarray,
    labels: np.ndarray,
    teacher_logits: np.ndarray | None,
    delta: float,
) -> tuple[LossBreakdown, ModelParams]:
    """Composite loss and its full parameter gradient via reverse-mode chain rule.

    The KL term is dropped when `teacher_logits` is None (first round of the
    first task, when no meaningful global model exists yet).
    """
    if delta < 0:
        raise ValidationError(f"delta must be >= 0, got {delta}")
    x = _check_batch(spec, batch)
    _check_params(params, spec)
    logits, inputs, pre = _forward_cached(params, spec, x)

    ce, g = loss_ce(logits, labels)
    if teacher_logits is not None:
        kl, g_kl = loss_kl(teacher_logits, logits)
        g = g + g_kl
    else:
        kl = 0.0
    mg, g_mg = loss_mg(logits)
    if delta != 0.0:
        g = g + delta * g_mg
    breakdown = LossBreakdown(ce=ce, kl=kl, mg=mg, total=ce + kl + delta * mg)

    layers = params.layer_arrays()
    grads: list[np.ndarray] = []
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        a_in = inputs[idx]
        grads.append(g.sum(axis=0))          # bias
        grads.append((a_in.T @ g).reshape(-1))  # weights, row-major
        if idx > 0:
            g = (g @ w.T) * (pre[idx - 1] > 0.0)
    grads.reverse()
    return breakdown, ModelParams(np.concatenate(grads), params.shapes)


def per_sample_grad_sqnorms(
    params: ModelParams, spec: MlpSpec, batch: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Squared L2 norm of each sample's own CE gradient w.r.t. the parameters.

    Uses the rank-one structure of per-sample layer gradients:
    ||a delta^T||_F^2 = ||a||^2 ||delta||^2, so one batched backward pass
    yields every sample's squared norm without materializing the gradients.
    """
    x = _check_batch(spec, batch)
    _check_params(params, spec)
    labels = np.asarray(labels, dtype=np.int64)
    logits, inputs, pre = _forward_cached(params, spec, x)
    rows = logits.shape[0]
    g = softmax(logits)
    g[np.arange(rows), labels] -= 1.0  # per-sample CE gradient (batch of one each)

    layers = params.layer_arrays()
    total = np.zeros(rows)
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        a_sq = (inputs[idx] ** 2).sum(axis=1)
        g_sq = (g**2).sum(axis=1)
        total += a_sq * g_sq + g_sq
        if idx > 0:
            g = (g @ w.T) * (pre[idx - 1] > 0.0)
    return total


def per_sample_grad_sqnorm(params: ModelParams, spec: MlpSpec, sample_features: np.ndarray,
                           label: int) -> float:
    """Single-sample convenience wrapper around per_sample_grad_sqnorms."""
    x = np.asarray(sample_features, dtype=np.float64).reshape(1, -1)
    return float(per_sample_grad_sqnorms(params, spec, x, np.array([label]))[0])


def expand_head(
    params: ModelParams, spec: MlpSpec, new_num_classes: int
) -> tuple[ModelParams, MlpSpec]:
    """Grow the output layer with zero-initialized parameters for new classes.

    Existing parameters are preserved exactly and old-class logits are
    bitwise unchanged on any input; logits for the new classes are zero.
    """
    if new_num_classes < spec.num_classes:
        raise ValidationError(
            f"cannot shrink head from {spec.num_classes} to {new_num_classes} classes"
        )
    if new_num_classes == spec.num_classes:
        return params, spec
    _check_params(params, spec)
    new_spec = MlpSpec(spec.feature_dim, new_num_classes, spec.hidden)
    extra = new_num_classes - spec.num_classes
    layers = params.layer_arrays()
    chunks: list[np.ndarray] = []
    for i, (w, b) in enumerate(layers):
        if i == len(layers) - 1:
            w = np.concatenate([w, np.zeros((w.shape[0], extra))], axis=1)
            b = np.concatenate([b, np.zeros(extra)])
        chunks.append(w.reshape(-1))
        chunks.append(b)
    return ModelParams(np.concatenate(chunks), new_spec.param_shapes()), new_spec
