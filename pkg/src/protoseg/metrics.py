"""Segmentation quality and diagnostics: per-class Dice, prototype-usage
statistics, and the prototype Gram report."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .data import Sample
from .network import MappingMatrix, NetConfig, NetworkParams, predict

_EVAL_BATCH = 8


@dataclass
class MetricsReport:
    """Per-class Dice plus prototype-usage and orthogonality diagnostics.

    ``mean_dice`` averages foreground classes only (background excluded).
    ``marginal_over_prototypes`` is the mean prediction over all pixels.
    """

    dice_per_class: list[float]
    mean_dice: float
    marginal_over_prototypes: list[float]
    marginal_entropy: float
    gram_max_offdiag: float
    gram_diag_deviation: float


def dice(pred_mask: np.ndarray, true_mask: np.ndarray, class_k: int) -> float:
    """Overlap 2|P & T| / (|P| + |T|); 1.0 when the class is absent from both."""
    if pred_mask.shape != true_mask.shape:
        raise ValueError(f"dice: shape mismatch {pred_mask.shape} vs {true_mask.shape}")
    p = pred_mask == class_k
    t = true_mask == class_k
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def gram_stats(params: NetworkParams) -> tuple[float, float]:
    """(max |off-diagonal|, max |diagonal - 1|) of the prototype Gram matrix."""
    w = params.head.data.astype(np.float64)
    gram = w.T @ w
    off = gram - np.diag(np.diag(gram))
    max_off = float(np.abs(off).max()) if gram.shape[0] > 1 else 0.0
    diag_dev = float(np.abs(np.diag(gram) - 1.0).max())
    return max_off, diag_dev


def evaluate(params: NetworkParams, mapping: MappingMatrix,
             dataset: Sequence[Sample], config: NetConfig) -> MetricsReport:
    """Dice per class averaged over images, prototype marginal over all
    pixels, and the Gram report. Every sample needs a ground-truth mask."""
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    c = config.num_classes
    dice_sums = np.zeros(c)
    marginal = np.zeros(mapping.num_prototypes, dtype=np.float64)
    total_pixels = 0
    for start in range(0, len(dataset), _EVAL_BATCH):
        chunk = dataset[start:start + _EVAL_BATCH]
        images = Tensor(np.stack([s.image for s in chunk]))
        f_prime, _, _, hard = predict(params, mapping, images)
        marginal += f_prime.data.astype(np.float64).sum(axis=(0, 2, 3))
        total_pixels += f_prime.shape[0] * f_prime.shape[2] * f_prime.shape[3]
        for s, pred in zip(chunk, hard):
            if s.mask is None:
                raise ValueError("evaluate: dataset sample has no mask")
            for k in range(c):
                dice_sums[k] += dice(pred, s.mask, k)
    dice_per_class = (dice_sums / len(dataset)).tolist()
    q = marginal / total_pixels
    marginal_entropy = float(-(q * np.log(np.maximum(q, 1e-12))).sum())
    max_off, diag_dev = gram_stats(params)
    return MetricsReport(
        dice_per_class=dice_per_class,
        mean_dice=float(np.mean(dice_per_class[1:])),
        marginal_over_prototypes=q.tolist(),
        marginal_entropy=marginal_entropy,
        gram_max_offdiag=max_off,
        gram_diag_deviation=diag_dev,
    )


def seed_aggregate(reports: Sequence[MetricsReport]) -> tuple[MetricsReport, MetricsReport]:
    """Fieldwise arithmetic mean and population standard deviation."""
    if not reports:
        raise ValueError("seed_aggregate: need at least one report")

    def agg(values):
        arr = np.asarray(values, dtype=np.float64)
        return arr.mean(axis=0), arr.std(axis=0)

    mean_kw, std_kw = {}, {}
    for f in fields(MetricsReport):
        m, s = agg([getattr(r, f.name) for r in reports])
        if f.type == "list[float]":
            mean_kw[f.name], std_kw[f.name] = m.tolist(), s.tolist()
        else:
            mean_kw[f.name], std_kw[f.name] = float(m), float(s)
    return MetricsReport(**mean_kw), MetricsReport(**std_kw)
