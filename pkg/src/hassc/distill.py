"""EMA teacher and self-distillation terms."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .grid import ProbabilityVolume, SemanticGrid
from .hardness import HardnessField, LgaConfig
from .losses import PROB_EPS, LossResult, hvm_loss_probs, softmax
from .metrics import ConfusionMatrix, miou
from .selection import SelectionConfig, SelectionSet, attach_local_weights, select_hard_voxels


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 48.0
    delta: float = 0.1
    gamma_cap: float = 0.99

    def __post_init__(self):
        if self.lam < 0 or self.delta < 0:
            raise ConfigError("lambda and delta must be non-negative")
        if not 0.0 < self.gamma_cap < 1.0:
            raise ConfigError("gamma_cap must lie in (0, 1)")


def ema_gamma(step: int, cap: float = 0.99) -> float:
    return min(1.0 - 1.0 / (step + 1), cap)


@dataclass(frozen=True, eq=False)
class TeacherState:
    params: np.ndarray
    step: int = 0

    @classmethod
    def from_student(cls, student_params) -> "TeacherState":
        return cls(np.array(student_params, dtype=np.float64, copy=True), 0)


def ema_update(ts: TeacherState, student_params, cap: float = 0.99) -> TeacherState:
    """One EMA step; gamma uses the step counter *before* incrementing."""
    student_params = np.asarray(student_params, dtype=np.float64)
    if student_params.shape != ts.params.shape:
        raise ShapeError(f"student has {student_params.shape} params, teacher {ts.params.shape}")
    g = ema_gamma(ts.step, cap)
    return TeacherState(g * ts.params + (1.0 - g) * student_params, ts.step + 1)


def miou_scale(teacher_pred: ProbabilityVolume, gt: SemanticGrid) -> float:
    """mIoU of the teacher's argmax against ``gt`` (empty class and invalid voxels excluded)."""
    if teacher_pred.dims.shape != gt.dims.shape:
        raise ShapeError("teacher prediction and ground truth grids differ")
    valid = gt.valid
    cm = ConfusionMatrix(gt.num_classes).add_labels(teacher_pred.argmax()[valid], gt.labels[valid])
    return miou(cm, include_empty=False, empty_id=gt.empty_id)


def _flat(p) -> np.ndarray:
    p = p.probs if isinstance(p, ProbabilityVolume) else np.asarray(p, dtype=np.float64)
    return p.reshape(-1, p.shape[-1])


def distill_loss(student_probs, teacher_probs, mu: float, cfg: DistillConfig = DistillConfig(),
                 valid=None, eps: float = PROB_EPS) -> LossResult:
    """``lam * e^mu * mean_v KL(teacher_v || student_v)`` with an ``eps`` floor on both sides.

    Gradient is w.r.t. the student probabilities; chain through
    :func:`hassc.losses.softmax_backward` for logits, or use
    :func:`distill_loss_logits`.
    """
    p, q = _flat(student_probs), _flat(teacher_probs)
    if p.shape != q.shape:
        raise ShapeError(f"student {p.shape} vs teacher {q.shape}")
    valid = np.ones(len(p), dtype=bool) if valid is None else np.asarray(valid, dtype=bool).ravel()
    grad = np.zeros_like(p)
    n = int(valid.sum())
    if n == 0:
        return LossResult(0.0, grad.reshape(np.shape(_raw(student_probs))), flagged=True)
    scale = cfg.lam * math.exp(mu) / n
    pv, qv = np.maximum(p[valid], eps), np.maximum(q[valid], eps)
    kl = (qv * (np.log(qv) - np.log(pv))).sum()
    live = p[valid] > eps
    grad[valid] = np.where(live, -scale * qv / np.where(live, pv, 1.0), 0.0)
    return LossResult(float(scale * kl), grad.reshape(np.shape(_raw(student_probs))))


def _raw(x):
    return x.probs if isinstance(x, ProbabilityVolume) else x


def distill_loss_logits(student_logits, teacher_probs, mu: float,
                        cfg: DistillConfig = DistillConfig(), valid=None,
                        eps: float = PROB_EPS) -> LossResult:
    """:func:`distill_loss` with the student given as logits; gradient w.r.t. the logits."""
    z = np.asarray(student_logits, dtype=np.float64)
    p = softmax(z.reshape(-1, z.shape[-1]))
    res = distill_loss(p, teacher_probs, mu, cfg, valid, eps)
    q = np.maximum(_flat(teacher_probs), eps)
    valid = np.ones(len(p), dtype=bool) if valid is None else np.asarray(valid, dtype=bool).ravel()
    n = int(valid.sum())
    grad = np.zeros_like(p)
    if n:
        scale = cfg.lam * math.exp(mu) / n
        live = p[valid] > eps
        qlive = np.where(live, q[valid], 0.0)
        grad[valid] = scale * (p[valid] * qlive.sum(-1, keepdims=True) - qlive)
    return LossResult(res.loss, grad.reshape(z.shape), res.flagged)


def teacher_guided_hvm(teacher_hardness: HardnessField, student_final: ProbabilityVolume,
                       gt: SemanticGrid, cfg: SelectionConfig, lga_cfg: LgaConfig = LgaConfig(),
                       rng=None, lga_values=None, weighted: bool = True,
                       selection: SelectionSet | None = None):
    """Hard-voxel loss on the student's full-resolution prediction at teacher-chosen voxels.

    Returns ``(LossResult, SelectionSet)``; the gradient has the shape of
    ``student_final.probs``. ``weighted=False`` replaces local hardness
    weights by 1. A precomputed ``selection`` skips the sampling step.
    """
    if student_final.dims.shape != gt.dims.shape:
        raise ShapeError("student prediction must be at ground-truth resolution")
    if selection is None:
        selection = select_hard_voxels(teacher_hardness, cfg, rng)
        selection = attach_local_weights(selection, gt, lga_cfg, teacher_hardness.dims, lga_values)
    w = selection.weights if weighted else np.ones(len(selection))
    flat_idx = np.ravel_multi_index(tuple(selection.targets.T), gt.dims.shape) \
        if len(selection) else np.zeros(0, dtype=np.int64)
    probs = student_final.probs.reshape(-1, student_final.num_classes)
    res = hvm_loss_probs(probs[flat_idx], selection.labels, w)
    grad = np.zeros_like(probs)
    np.add.at(grad, flat_idx, res.grad)
    return LossResult(res.loss, grad.reshape(student_final.probs.shape), res.flagged), selection
