"""Objective terms: supervised cross-entropy, the mutual-information
regularizer over prototype probabilities, the prototype-orthogonality
penalty, and the three comparison losses (entropy minimization,
pseudo-labeling, teacher consistency).

Probabilities are clamped at 1e-8 inside every log, so exact one-hots are
safe. All functions return scalar tensors wired into the autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (Tensor, add, clamp_min, log, matmul2, mul, scale,
                       sub, sum_all, reduce, transpose2)

LOG_EPS = 1e-8


@dataclass
class LossWeights:
    """Loss coefficients and schedule/teacher knobs."""

    lambda1: float = 0.01          # mutual-information weight
    lambda2: float = 0.5           # orthogonality weight
    ramp_fraction: float = 0.2     # fraction of epochs to ramp regularizers in
    baseline_weight: float = 0.1   # weight of the comparison-method term
    pseudo_label_threshold: float = 0.9
    ema_decay: float = 0.99

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "baseline_weight"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if not 0.0 <= self.ramp_fraction <= 1.0:
            raise ValueError(f"ramp_fraction must be in [0,1], got {self.ramp_fraction}")
        if not 0.0 < self.pseudo_label_threshold < 1.0:
            raise ValueError(
                f"pseudo_label_threshold must be in (0,1), got {self.pseudo_label_threshold}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0,1), got {self.ema_decay}")


@dataclass
class LossBreakdown:
    """Unweighted term values plus the weighted total of one step."""

    sup: float = 0.0
    mi: float = 0.0
    orth: float = 0.0
    baseline_term: float = 0.0
    total: float = 0.0


def _pixels(t: Tensor) -> int:
    """Batch * H * W for a [B,K,H,W] tensor."""
    b, _, h, w = t.shape
    return b * h * w


def _check_probs_shape(name: str, t: Tensor) -> None:
    if t.data.ndim != 4:
        raise ValueError(f"{name}: expected [B,K,H,W] probabilities, got rank {t.data.ndim}")


def ce_loss(y: Tensor, f: Tensor) -> Tensor:
    """Mean per-pixel cross-entropy -y*log(f), averaged over batch and pixels."""
    _check_probs_shape("ce_loss", f)
    if y.shape != f.shape:
        raise ValueError(f"ce_loss: target shape {y.shape} != prediction shape {f.shape}")
    s = sum_all(mul(y, log(clamp_min(f, LOG_EPS))))
    return scale(s, -1.0 / _pixels(f))


def entropy(p: Tensor) -> Tensor:
    """Shannon entropy per pixel, averaged over batch and pixels."""
    _check_probs_shape("entropy", p)
    s = sum_all(mul(p, log(clamp_min(p, LOG_EPS))))
    return scale(s, -1.0 / _pixels(p))


def marginal_distribution(f_prime: Tensor) -> Tensor:
    """Average prediction over every pixel of every image: a [C'] vector."""
    _check_probs_shape("marginal_distribution", f_prime)
    return reduce(f_prime, "mean", axes=(0, 2, 3))


def mi_loss(f_prime: Tensor) -> Tensor:
    """Negated mutual information between pixel and prototype label.

    -H(marginal) + mean conditional entropy; minimizing balances prototype
    usage while sharpening per-pixel predictions. Always in [-ln C', 0].
    """
    return mi_loss_parts([f_prime])


def mi_loss_parts(batches: Sequence[Tensor]) -> Tensor:
    """MI regularizer over the union of one or more prediction batches,
    weighted by pixel count so the result equals a single joint batch."""
    if not batches:
        raise ValueError("mi_loss: empty batch")
    for t in batches:
        _check_probs_shape("mi_loss", t)
        if t.shape[0] == 0:
            raise ValueError("mi_loss: empty batch")
    total = sum(_pixels(t) for t in batches)
    marg = None
    cond = None
    for t in batches:
        w = _pixels(t) / total
        q = scale(marginal_distribution(t), w)
        h = scale(entropy(t), w)
        marg = q if marg is None else add(marg, q)
        cond = h if cond is None else add(cond, h)
    neg_h_marg = sum_all(mul(marg, log(clamp_min(marg, LOG_EPS))))
    return add(neg_h_marg, cond)


def orth_loss(w: Tensor) -> Tensor:
    """Squared Frobenius distance of the prototype Gram matrix from identity.

    Columns of w are the prototypes; zero iff they are orthonormal.
    """
    if w.data.ndim != 2:
        raise ValueError(f"orth_loss: expected [N,C'] matrix, got rank {w.data.ndim}")
    cprime = w.shape[1]
    gram = matmul2(transpose2(w), w)
    diff = sub(gram, Tensor(np.eye(cprime, dtype=w.dtype)))
    return sum_all(mul(diff, diff))


def entropy_min_loss(f: Tensor) -> Tensor:
    """Comparison method: mean prediction entropy on unlabeled images."""
    return entropy(f)


def pseudo_label_loss(f: Tensor, threshold: float) -> Tensor:
    """Comparison method: -log f at the argmax class of confident pixels.

    Pixels whose max probability is below ``threshold`` contribute zero;
    the average runs over all pixels. The argmax target is a constant.
    """
    _check_probs_shape("pseudo_label_loss", f)
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"pseudo_label_loss: threshold must be in (0,1), got {threshold}")
    p = f.data
    confident = p.max(axis=1) >= threshold          # [B,H,W]
    winner = p.argmax(axis=1)                       # [B,H,W]
    target = np.zeros_like(p)
    b_idx, h_idx, w_idx = np.nonzero(confident)
    target[b_idx, winner[b_idx, h_idx, w_idx], h_idx, w_idx] = 1.0
    s = sum_all(mul(Tensor(target), log(clamp_min(f, LOG_EPS))))
    return scale(s, -1.0 / _pixels(f))


def consistency_loss(student_f: Tensor, teacher_f: Tensor) -> Tensor:
    """Mean squared error between student and (constant) teacher predictions."""
    if student_f.shape != teacher_f.shape:
        raise ValueError(
            f"consistency_loss: shape mismatch {student_f.shape} vs {teacher_f.shape}")
    diff = sub(student_f, Tensor(np.asarray(teacher_f.data)))
    return scale(sum_all(mul(diff, diff)), 1.0 / student_f.data.size)


def total_loss(sup: Tensor, mi: Tensor | None, orth: Tensor | None,
               baseline_term: Tensor | None, weights: LossWeights,
               ramp: float) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum sup + ramp*(l1*mi + l2*orth + bw*baseline).

    Returns the scalar graph tensor (for backward) and the recorded
    breakdown of unweighted term values.
    """
    if not 0.0 <= ramp <= 1.0:
        raise ValueError(f"total_loss: ramp must be in [0,1], got {ramp}")

    def as_scalar(x):
        return x if x is None or isinstance(x, Tensor) else Tensor(float(x))

    sup, mi, orth, baseline_term = map(as_scalar, (sup, mi, orth, baseline_term))
    total = sup
    bd = LossBreakdown(sup=float(sup.data))
    if mi is not None:
        bd.mi = float(mi.data)
        total = add(total, scale(mi, ramp * weights.lambda1))
    if orth is not None:
        bd.orth = float(orth.data)
        total = add(total, scale(orth, ramp * weights.lambda2))
    if baseline_term is not None:
        bd.baseline_term = float(baseline_term.data)
        total = add(total, scale(baseline_term, ramp * weights.baseline_weight))
    bd.total = float(total.data)
    return total, bd
