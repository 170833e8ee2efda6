"""Supervision, distillation and batch objectives, each with its logit gradient.

Per-task loss functions accept either a single instance (1-D logits) or a
row-per-instance matrix; the returned value is the sum over instances and
the gradient has the shape of ``logits``. Teacher logits passed to the
distillation losses are treated as constants.
"""
from dataclasses import dataclass, field

import numpy as np

from mtdistill import kernels
from mtdistill.model import AU_DIM, EXPR_DIM, VA_HALF, ModelOutput, backward, forward
from mtdistill.numerics import VA_GRID, ccc, ccc_grad, to_bin

CROSS_TASK_MODES = ("instance", "literal", "none")


class BatchError(ValueError):
    """The batch cannot be evaluated (e.g. a single valence-arousal instance)."""


@dataclass(frozen=True)
class DistillConfig:
    """Distillation settings.

    ``cross_task`` selects how unlabeled heads are distilled: ``"instance"``
    distills every head j != i on the same instance of task i,
    ``"literal"`` distills head j on the task-j instances instead (weighting
    them once per other task), and ``"none"`` drops the unlabeled-task
    terms (diagnostic).
    """

    temperature: float = 1.5
    lam: float = 0.6
    cross_task: str = "instance"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.cross_task not in CROSS_TASK_MODES:
            raise ValueError(f"cross_task must be one of {CROSS_TASK_MODES}")


def _rows(a):
    a = np.asarray(a, dtype=np.float64)
    return (a[None, :], True) if a.ndim == 1 else (a, False)


def _finish(values, grad, single):
    return float(values.sum()), (grad[0] if single else grad)


def _onehot_rows(idx, size):
    idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
    out = np.zeros((idx.size, size))
    out[np.arange(idx.size), idx] = 1.0
    return out


def loss_au(y, logits):
    """Binary cross entropy of sigmoid(logits) against AU bits."""
    z, single = _rows(logits)
    y, _ = _rows(y)
    values, grad = kernels.sigmoid_bce(y, z)
    return _finish(values, grad, single)


def loss_expr(y, logits):
    """Categorical cross entropy; ``y`` is a class index (or array of them)."""
    z, single = _rows(logits)
    if np.any(np.asarray(y) < 0) or np.any(np.asarray(y) >= EXPR_DIM):
        raise ValueError("expression class out of range")
    values, grad = kernels.softmax_xent(_onehot_rows(y, EXPR_DIM), z, 1.0)
    return _finish(values, grad, single)


def _va_class(va, z, grid):
    bins = to_bin(va, grid)
    values = np.zeros(z.shape[0])
    grad = np.empty_like(z)
    for k in range(2):
        block = slice(k * VA_HALF, (k + 1) * VA_HALF)
        v, g = kernels.softmax_xent(_onehot_rows(bins[:, k], VA_HALF), np.ascontiguousarray(z[:, block]), 1.0)
        values += v
        grad[:, block] = g
    return values, grad


def loss_va_class(va, va_logits, grid=VA_GRID):
    """Sum of the valence and arousal bin cross entropies."""
    z, single = _rows(va_logits)
    va, _ = _rows(va)
    values, grad = _va_class(va, z, grid)
    return _finish(values, grad, single)


def _ccc_term(va, z, grid):
    """Batch term sum_k (1 - CCC_k) and its gradient through the bin expectation."""
    total = 0.0
    grad = np.empty_like(z)
    for k in range(2):
        block = slice(k * VA_HALF, (k + 1) * VA_HALF)
        means, probs = kernels.bin_expectation_rows(np.ascontiguousarray(z[:, block]), grid.centers)
        total += 1.0 - ccc(va[:, k], means)
        d_means = -ccc_grad(va[:, k], means)
        grad[:, block] = d_means[:, None] * probs * (grid.centers[None, :] - means[:, None])
    return total, grad


def loss_va(va, va_logits, grid=VA_GRID):
    """Valence-arousal loss summed over a batch of B >= 2 instances.

    Each instance carries its bin cross entropy plus a 1/B share of
    ``sum_k (1 - CCC_k)``, so the batch total is the classification sum plus
    the CCC term once. The gradient couples all instances through CCC.
    """
    va = np.atleast_2d(np.asarray(va, dtype=np.float64))
    z = np.atleast_2d(np.asarray(va_logits, dtype=np.float64))
    if z.shape[0] < 2:
        raise BatchError(f"valence-arousal loss needs at least 2 instances, got {z.shape[0]}")
    class_values, class_grad = _va_class(va, z, grid)
    ccc_total, ccc_g = _ccc_term(va, z, grid)
    return float(class_values.sum()) + ccc_total, class_grad + ccc_g


def loss_va_per_instance(va, va_logits, grid=VA_GRID):
    """Per-instance values of :func:`loss_va` (classification + 1/B CCC share)."""
    va = np.atleast_2d(np.asarray(va, dtype=np.float64))
    z = np.atleast_2d(np.asarray(va_logits, dtype=np.float64))
    if z.shape[0] < 2:
        raise BatchError("valence-arousal loss needs at least 2 instances")
    class_values, _ = _va_class(va, z, grid)
    ccc_total, _ = _ccc_term(va, z, grid)
    return class_values + ccc_total / z.shape[0]


def distill_au(teacher_logits, student_logits):
    z, single = _rows(student_logits)
    t, _ = _rows(teacher_logits)
    values, grad = kernels.sigmoid_bce(kernels.sigmoid_rows(t), z)
    return _finish(values, grad, single)


def distill_expr(teacher_logits, student_logits, temperature=1.5):
    z, single = _rows(student_logits)
    t, _ = _rows(teacher_logits)
    values, grad = kernels.softmax_xent(kernels.softmax_rows(t, temperature), z, temperature)
    return _finish(values, grad, single)


def _distill_va_rows(t, z, temperature):
    values = np.zeros(z.shape[0])
    grad = np.empty_like(z)
    for k in range(2):
        block = slice(k * VA_HALF, (k + 1) * VA_HALF)
        target = kernels.softmax_rows(np.ascontiguousarray(t[:, block]), temperature)
        v, g = kernels.softmax_xent(target, np.ascontiguousarray(z[:, block]), temperature)
        values += v
        grad[:, block] = g
    return values, grad


def distill_va(teacher_va_logits, student_va_logits, temperature=1.5):
    z, single = _rows(student_va_logits)
    t, _ = _rows(teacher_va_logits)
    values, grad = _distill_va_rows(t, z, temperature)
    return _finish(values, grad, single)


@dataclass
class Batch:
    """N_i instances per task; rows of ``*_x`` are feature vectors.

    ``au_y`` is (N, 8) bits, ``expr_y`` (N,) class indices, ``va_y`` (N, 2)
    valence-arousal pairs. ``ids`` optionally records the source instance ids
    per task.
    """

    au_x: np.ndarray
    au_y: np.ndarray
    expr_x: np.ndarray
    expr_y: np.ndarray
    va_x: np.ndarray
    va_y: np.ndarray
    ids: tuple = field(default=(), compare=False)

    @property
    def sizes(self):
        return len(self.au_x), len(self.expr_x), len(self.va_x)

    def inputs(self):
        return np.concatenate([self.au_x, self.expr_x, self.va_x], axis=0)

    def task_slices(self):
        n1, n2, n3 = self.sizes
        return slice(0, n1), slice(n1, n1 + n2), slice(n1 + n2, n1 + n2 + n3)

    def validate(self):
        n3 = self.sizes[2]
        if 0 < n3 < 2:
            raise BatchError(f"valence-arousal subset needs at least 2 instances, got {n3}")


def _supervision(batch, out):
    """Summed supervision loss on each instance's own head, plus per-head gradients."""
    s_au, s_expr, s_va = batch.task_slices()
    grads = ModelOutput.zeros_like(out)
    total = 0.0
    if s_au.stop > s_au.start:
        v, g = loss_au(np.asarray(batch.au_y, dtype=np.float64), out.au[s_au])
        total += v
        grads.au[s_au] = g
    if s_expr.stop > s_expr.start:
        v, g = loss_expr(batch.expr_y, out.expr[s_expr])
        total += v
        grads.expr[s_expr] = g
    if s_va.stop > s_va.start:
        v, g = loss_va(batch.va_y, out.va[s_va])
        total += v
        grads.va[s_va] = g
    return total, grads


def teacher_batch_loss(batch, net):
    """Supervision-only batch objective.

    Runs forward and backward, accumulating into ``net.grads``. Returns the
    loss value and the per-instance logit gradients (rows ordered AU, EXPR,
    VA instances).
    """
    batch.validate()
    out, cache = forward(net, batch.inputs())
    total, grads = _supervision(batch, out)
    backward(net, cache, grads)
    return total, grads


def student_batch_loss(batch, teacher, student, cfg=DistillConfig()):
    """Supervision plus teacher-distillation objective for the student.

    Accumulates into ``student.grads`` only; the teacher is evaluated but
    never differentiated.
    """
    batch.validate()
    x = batch.inputs()
    t_out, _ = forward(teacher, x)
    s_out, cache = forward(student, x)
    sup_total, sup_grads = _supervision(batch, s_out)
    lam = cfg.lam
    n = x.shape[0]
    slices = batch.task_slices()
    own_weight = 1.0 - lam + (2.0 if cfg.cross_task == "literal" else 0.0)
    other_weight = 1.0 if cfg.cross_task == "instance" else 0.0

    total = lam * sup_total
    grads = []
    head_distill = (
        lambda t, s: kernels.sigmoid_bce(kernels.sigmoid_rows(t), s),
        lambda t, s: kernels.softmax_xent(kernels.softmax_rows(t, cfg.temperature), s, cfg.temperature),
        lambda t, s: _distill_va_rows(t, s, cfg.temperature),
    )
    for j, dist in enumerate(head_distill):
        weights = np.full(n, other_weight)
        weights[slices[j]] = own_weight
        values, g = dist(t_out[j], np.ascontiguousarray(s_out[j]))
        total += float(weights @ values)
        grads.append(lam * sup_grads[j] + weights[:, None] * g)
    grads = ModelOutput(*grads)
    backward(student, cache, grads)
    return total, grads
