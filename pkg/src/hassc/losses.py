"""Voxel classification losses with analytic gradients.

Every loss returns a :class:`LossResult` holding the scalar value and the
gradient with respect to its differentiable input (logits, or probabilities for
the ``*_probs`` variants). Inputs are flat ``(V, C)`` arrays; callers reshape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import NonFiniteLossError

PROB_EPS = 1e-12


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    flagged: bool = False

    def scaled(self, s: float) -> "LossResult":
        return LossResult(s * self.loss, s * self.grad, self.flagged)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    # max-subtraction changes low-order bits; keep it for overflow safety
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(-1, keepdims=True))
    return z / z.sum(-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain a probability gradient through softmax to its logits."""
    return probs * (grad_probs - (grad_probs * probs).sum(-1, keepdims=True))


def _valid_mask(targets, ignore_index):
    targets = np.asarray(targets, dtype=np.int64)
    if ignore_index is None:
        return targets, np.ones(targets.shape, dtype=bool)
    return targets, targets != ignore_index


def weighted_ce(logits: np.ndarray, targets, class_weights=None, ignore_index=None) -> LossResult:
    """Mean over valid voxels of ``w[target] * -log softmax(logits)[target]``.

    The denominator is the number of valid voxels, not the weight sum.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets, valid = _valid_mask(targets, ignore_index)
    grad = np.zeros_like(logits)
    n = int(valid.sum())
    if n == 0:
        return LossResult(0.0, grad, flagged=True)
    z, t = logits[valid], targets[valid]
    w = np.ones(logits.shape[-1]) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    wt = w[t]
    lsm = log_softmax(z)
    rows = np.arange(len(t))
    loss = float(-(wt * lsm[rows, t]).sum() / n)
    g = np.exp(lsm)
    g[rows, t] -= 1.0
    grad[valid] = g * (wt / n)[:, None]
    return LossResult(loss, grad)


def hvm_loss(logits: np.ndarray, labels, weights, ignore_index=None) -> LossResult:
    """Hardness-weighted cross-entropy ``(1/N) sum_n w_n CE(logits_n, label_n)``."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1, np.shape(logits)[-1])
    labels, valid = _valid_mask(np.asarray(labels).reshape(-1), ignore_index)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(logits)
    n = int(valid.sum())
    if n == 0:
        return LossResult(0.0, grad, flagged=True)
    z, t, w = logits[valid], labels[valid], weights[valid]
    lsm = log_softmax(z)
    rows = np.arange(n)
    loss = float(-(w * lsm[rows, t]).sum() / n)
    g = np.exp(lsm)
    g[rows, t] -= 1.0
    grad[valid] = g * (w / n)[:, None]
    return LossResult(loss, grad)


def hvm_loss_probs(probs: np.ndarray, labels, weights, eps: float = PROB_EPS) -> LossResult:
    """Hardness-weighted cross-entropy on probabilities already normalised.

    Used where the scored prediction is an interpolated probability volume
    rather than raw logits. Gradient is with respect to ``probs``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(probs)
    n = len(labels)
    if n == 0:
        return LossResult(0.0, grad, flagged=True)
    rows = np.arange(n)
    p = probs[rows, labels]
    floored = p <= eps
    loss = float(-(weights * np.log(np.maximum(p, eps))).sum() / n)
    grad[rows, labels] = np.where(floored, 0.0, -weights / (n * np.where(floored, 1.0, p)))
    return LossResult(loss, grad)


class AffinityTerm(Protocol):
    """Pluggable scene-class affinity loss on ``(V, C)`` probabilities.

    Returns a :class:`LossResult` whose gradient is w.r.t. the probabilities.
    """

    def __call__(self, probs: np.ndarray, targets: np.ndarray, valid: np.ndarray) -> LossResult: ...


def zero_affinity(probs, targets, valid) -> LossResult:
    return LossResult(0.0, np.zeros_like(probs))


@dataclass
class LossReport:
    wce: float = 0.0
    s_hvm: float = 0.0
    t_hvm: float = 0.0
    distill: float = 0.0
    delta: float = 0.1
    affinity: float = 0.0
    grad_norms: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.wce + self.affinity + self.s_hvm + self.delta * self.t_hvm + self.distill

    def terms(self) -> dict:
        return {"wce": self.wce, "s_hvm": self.s_hvm, "t_hvm": self.t_hvm,
                "distill": self.distill, "affinity": self.affinity}


def compose_total(wce=0.0, s_hvm=0.0, t_hvm=0.0, distill=0.0, delta=0.1,
                  affinity=0.0, grad_norms=None, step=None) -> LossReport:
    parts = {"wce": wce, "s_hvm": s_hvm, "t_hvm": t_hvm, "distill": distill,
             "affinity": affinity, "delta": delta}
    for name, v in parts.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(name, step)
    return LossReport(float(wce), float(s_hvm), float(t_hvm), float(distill),
                      float(delta), float(affinity), dict(grad_norms or {}))
