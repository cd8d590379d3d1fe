"""Deterministic semi-supervised training loop.

Covers the full method (multi-prototype head + mutual-information +
orthogonality regularizers), its five ablation variants, the three
comparison methods (entropy minimization, pseudo-labeling, mean teacher),
the combined teacher variant, and the fully supervised upper bound.

Every random draw comes from a generator derived from
(config seed, epoch, step, purpose), so the whole pipeline is a pure
function of the config and resuming from a checkpoint replays the exact
uninterrupted trajectory.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import data as datamod
from . import losses as lossmod
from .autodiff import Tensor, backward
from .data import DatasetSpec, Sample
from .losses import LossBreakdown, LossWeights
from .metrics import MetricsReport, evaluate
from .network import (CHECKPOINT_MAGIC, MappingMatrix, NetConfig,
                      NetworkParams, ParamFormatError, build_mapping,
                      init_params, forward_features, over_seg_probs,
                      aggregate_classes, params_from_arrays, predict,
                      read_array_record, write_array_record)

CHECKPOINT_VERSION = 2

METHODS = ("baseline", "variant1", "variant2", "variant3", "variant4",
           "variant5", "ours", "entropy_min", "pseudo_label", "mean_teacher",
           "mt_ours", "full_sup")

# method -> (multi-prototype, mutual-information, orthogonality)
_METHOD_FLAGS = {
    "baseline": (False, False, False),
    "variant1": (True, False, False),
    "variant2": (False, True, False),
    "variant3": (False, False, True),
    "variant4": (True, True, False),
    "variant5": (True, False, True),
    "ours": (True, True, True),
    "entropy_min": (False, False, False),
    "pseudo_label": (False, False, False),
    "mean_teacher": (False, False, False),
    "mt_ours": (True, True, True),
    "full_sup": (False, False, False),
}

_TEACHER_METHODS = {"mean_teacher", "mt_ours"}
_BASELINE_TERM = {"entropy_min", "pseudo_label", "mean_teacher", "mt_ours"}

# rng stream tags
_SHUFFLE_LABELED = 11
_SHUFFLE_UNLABELED = 12
_AUG_LABELED = 21
_AUG_UNLABELED = 22
_AUG_TEACHER = 23


class TrainingDiverged(RuntimeError):
    """Raised when the total loss turns non-finite."""


@dataclass
class TrainConfig:
    """Full experiment description; resolve() applies method-derived rules."""

    method: str
    data: DatasetSpec
    net: NetConfig
    num_labeled: int
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 200
    labeled_batch: int = 4
    unlabeled_batch: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    mi_on_labeled: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise ValueError("batch sizes must be >= 1")

    @property
    def mp(self) -> bool:
        return _METHOD_FLAGS[self.method][0]

    @property
    def mi(self) -> bool:
        return _METHOD_FLAGS[self.method][1]

    @property
    def orth(self) -> bool:
        return _METHOD_FLAGS[self.method][2]

    @property
    def uses_teacher(self) -> bool:
        return self.method in _TEACHER_METHODS

    @property
    def baseline_kind(self) -> Optional[str]:
        if self.method not in _BASELINE_TERM:
            return None
        return "consistency" if self.uses_teacher else self.method

    def resolve(self) -> "TrainConfig":
        """Apply the method grid: no multi-prototype flag forces P = 1, the
        fully supervised method labels everything, and the head's class
        count follows the dataset."""
        net = replace(self.net, num_classes=self.data.num_classes)
        if not self.mp:
            net = replace(net, prototypes_per_class=1)
        num_labeled = self.data.num_images if self.method == "full_sup" else self.num_labeled
        if not 1 <= num_labeled <= self.data.num_images:
            raise ValueError(
                f"num_labeled must be in [1, {self.data.num_images}], got {num_labeled}")
        return replace(self, net=net, num_labeled=num_labeled)


@dataclass
class OptimizerState:
    """Per-parameter momentum buffers mirroring the parameter shapes."""

    buffers: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "OptimizerState":
        return cls({name: np.zeros_like(t.data) for name, t in params.named_tensors()})


@dataclass
class EmaTeacher:
    """Exponential-moving-average copy of the student parameters."""

    params: NetworkParams
    decay: float


def sgd_step(params: NetworkParams, state: OptimizerState, lr: float,
             momentum: float) -> None:
    """v <- momentum*v + g; p <- p - lr*v; gradients cleared afterwards."""
    for name, t in params.named_tensors():
        if t.grad is None:
            raise ValueError(f"sgd_step: missing gradient on parameter {name!r}")
        v = state.buffers[name]
        if v.shape != t.data.shape:
            raise ValueError(f"sgd_step: state shape mismatch on {name!r}")
        v *= momentum
        v += t.grad
        t.data -= lr * v
    params.zero_grads()


def ema_update(teacher: EmaTeacher, student: NetworkParams) -> None:
    """t <- decay*t + (1-decay)*s elementwise."""
    alpha = teacher.decay
    for (tname, tt), (sname, st) in zip(teacher.params.named_tensors(),
                                        student.named_tensors()):
        if tt.data.shape != st.data.shape:
            raise ValueError(f"ema_update: shape mismatch on {tname!r}")
        assert tname == sname
        tt.data *= alpha
        tt.data += (1.0 - alpha) * st.data


def ramp_weight(epoch: int, total_epochs: int, ramp_fraction: float) -> float:
    """Linear 0 -> 1 over the first ramp_fraction of epochs, then 1."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    ramp_len = int(math.floor(ramp_fraction * total_epochs))
    if ramp_len <= 0:
        return 1.0
    return min(1.0, epoch / ramp_len)


@dataclass
class StepRngs:
    """Independent per-purpose generators for one training step."""

    labeled_aug: np.random.Generator
    unlabeled_aug: np.random.Generator
    teacher_aug: np.random.Generator


def step_rngs(seed: int, epoch: int, step: int) -> StepRngs:
    return StepRngs(
        labeled_aug=np.random.default_rng((seed, _AUG_LABELED, epoch, step)),
        unlabeled_aug=np.random.default_rng((seed, _AUG_UNLABELED, epoch, step)),
        teacher_aug=np.random.default_rng((seed, _AUG_TEACHER, epoch, step)),
    )


def _one_hot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    eye = np.eye(num_classes, dtype=np.float32)
    return np.ascontiguousarray(eye[mask].transpose(2, 0, 1))


def _batch_tensors(samples: list[Sample], rng: np.random.Generator,
                   noise_sigma: float, num_classes: Optional[int]):
    """Augment a batch; returns (images tensor, one-hot targets or None)."""
    augmented = [datamod.augment(s, rng, noise_sigma) for s in samples]
    images = Tensor(np.stack([s.image for s in augmented]))
    if num_classes is None:
        return images, None
    targets = Tensor(np.stack([_one_hot(s.mask, num_classes) for s in augmented]))
    return images, targets


def train_step(params: NetworkParams, state: OptimizerState,
               teacher: Optional[EmaTeacher], mapping: MappingMatrix,
               batch_labeled: list[Sample], batch_unlabeled: list[Sample],
               config: TrainConfig, epoch: int,
               rngs: StepRngs) -> LossBreakdown:
    """One optimization step; mutates params/state/teacher in place.

    Terms whose configured weight is exactly zero are skipped entirely, so
    e.g. the full method with zero regularizer weights and one prototype
    per class replays the plain supervised baseline bit for bit.
    """
    w = config.weights
    sigma = config.data.noise_sigma
    x_l, y = _batch_tensors(batch_labeled, rngs.labeled_aug, sigma,
                            config.net.num_classes)
    f_prime_l = over_seg_probs(params, forward_features(params, x_l))
    f_l = aggregate_classes(f_prime_l, mapping)
    sup = lossmod.ce_loss(y, f_l)

    have_unlabeled = len(batch_unlabeled) > 0
    mi_active = config.mi and w.lambda1 > 0 and have_unlabeled
    orth_active = config.orth and w.lambda2 > 0
    bkind = config.baseline_kind if (w.baseline_weight > 0 and have_unlabeled) else None

    mi_term = None
    orth_term = None
    baseline_term = None
    if mi_active or bkind is not None:
        x_u, _ = _batch_tensors(batch_unlabeled, rngs.unlabeled_aug, sigma, None)
        f_prime_u = over_seg_probs(params, forward_features(params, x_u))
        if mi_active:
            parts = [f_prime_u, f_prime_l] if config.mi_on_labeled else [f_prime_u]
            mi_term = lossmod.mi_loss_parts(parts)
        if bkind is not None:
            f_u = aggregate_classes(f_prime_u, mapping)
            if bkind == "entropy_min":
                baseline_term = lossmod.entropy_min_loss(f_u)
            elif bkind == "pseudo_label":
                baseline_term = lossmod.pseudo_label_loss(f_u, w.pseudo_label_threshold)
            else:  # consistency against the teacher on its own augmented view
                x_t, _ = _batch_tensors(batch_unlabeled, rngs.teacher_aug, sigma, None)
                _, f_t, _, _ = predict(teacher.params, mapping, x_t)
                baseline_term = lossmod.consistency_loss(f_u, f_t)
    if orth_active:
        orth_term = lossmod.orth_loss(params.head)

    ramp = ramp_weight(epoch, config.epochs, w.ramp_fraction)
    total, bd = lossmod.total_loss(sup, mi_term, orth_term, baseline_term, w, ramp)
    if not np.isfinite(bd.total):
        raise TrainingDiverged(f"non-finite total loss at epoch {epoch}: {bd}")
    backward(total)
    sgd_step(params, state, config.lr, config.momentum)
    if teacher is not None:
        ema_update(teacher, params)
    return bd


@dataclass
class EpochStats:
    """Per-epoch mean loss terms plus validation metrics."""

    epoch: int
    loss_sup: float
    loss_mi: float
    loss_orth: float
    loss_baseline: float
    loss_total: float
    val_mean_dice: float
    val_dice_per_class: list[float]
    marginal_entropy: float
    gram_max_offdiag: float


@dataclass
class TrainResult:
    """Outcome of a run: parameters at the best-validation epoch plus the
    final state needed to checkpoint and resume."""

    best_params: NetworkParams
    best_epoch: int
    best_val_dice: float
    history: list[EpochStats]
    mapping: MappingMatrix
    final_params: NetworkParams
    opt_state: OptimizerState
    teacher: Optional[EmaTeacher]
    config: TrainConfig


@dataclass
class CheckpointState:
    """Everything checkpoint_load recovers from disk."""

    params: NetworkParams
    opt_state: OptimizerState
    teacher_params: Optional[NetworkParams]
    epoch: int
    seed: int
    best_params: Optional[NetworkParams]
    best_epoch: int
    best_val_dice: float


def train(config: TrainConfig,
          resume: Optional[CheckpointState] = None) -> TrainResult:
    """Run (or resume) the configured training; returns best-epoch params
    and the per-epoch history from the starting epoch onward."""
    config = config.resolve()
    spec = config.data
    net_cfg = config.net
    mapping = build_mapping(net_cfg.num_classes, net_cfg.prototypes_per_class)
    train_set = datamod.train_samples(spec)
    val_set = datamod.val_samples(spec)
    split_idx = datamod.split(spec, config.num_labeled, split_seed=config.seed)

    if resume is not None:
        params = resume.params
        state = resume.opt_state
        teacher = (EmaTeacher(resume.teacher_params, config.weights.ema_decay)
                   if resume.teacher_params is not None else None)
        start_epoch = resume.epoch
        best_params = resume.best_params or params.copy()
        best_epoch = resume.best_epoch
        best_dice = resume.best_val_dice
    else:
        params = init_params(net_cfg, config.seed)
        state = OptimizerState.zeros_like(params)
        teacher = (EmaTeacher(params.copy(requires_grad=False),
                              config.weights.ema_decay)
                   if config.uses_teacher else None)
        start_epoch = 0
        best_params = params.copy()
        best_epoch = -1
        best_dice = float("-inf")

    labeled = split_idx.labeled_ids
    unlabeled = split_idx.unlabeled_ids
    if unlabeled:
        steps_per_epoch = math.ceil(len(unlabeled) / config.unlabeled_batch)
    else:
        steps_per_epoch = math.ceil(len(labeled) / config.labeled_batch)

    history: list[EpochStats] = []
    for epoch in range(start_epoch, config.epochs):
        order_l = np.random.default_rng(
            (config.seed, _SHUFFLE_LABELED, epoch)).permutation(labeled)
        order_u = np.random.default_rng(
            (config.seed, _SHUFFLE_UNLABELED, epoch)).permutation(unlabeled) \
            if unlabeled else np.empty(0, dtype=int)
        sums = np.zeros(5)
        for step in range(steps_per_epoch):
            batch_l = [train_set[order_l[(step * config.labeled_batch + i) % len(order_l)]]
                       for i in range(config.labeled_batch)]
            batch_u = []
            if len(order_u):
                batch_u = [train_set[order_u[(step * config.unlabeled_batch + i) % len(order_u)]]
                           for i in range(config.unlabeled_batch)]
            bd = train_step(params, state, teacher, mapping, batch_l, batch_u,
                            config, epoch, step_rngs(config.seed, epoch, step))
            sums += (bd.sup, bd.mi, bd.orth, bd.baseline_term, bd.total)
        means = sums / steps_per_epoch
        report = evaluate(params, mapping, val_set, net_cfg)
        history.append(EpochStats(
            epoch=epoch,
            loss_sup=means[0], loss_mi=means[1], loss_orth=means[2],
            loss_baseline=means[3], loss_total=means[4],
            val_mean_dice=report.mean_dice,
            val_dice_per_class=list(report.dice_per_class),
            marginal_entropy=report.marginal_entropy,
            gram_max_offdiag=report.gram_max_offdiag,
        ))
        if report.mean_dice > best_dice:
            best_dice = report.mean_dice
            best_epoch = epoch
            best_params = params.copy()

    return TrainResult(
        best_params=best_params, best_epoch=best_epoch, best_val_dice=best_dice,
        history=history, mapping=mapping, final_params=params, opt_state=state,
        teacher=teacher, config=config)


# ---------------------------------------------------------------------------
# checkpoints: array records in the parameter-file encoding plus run counters

def checkpoint_save(path, params: NetworkParams, state: OptimizerState,
                    teacher: Optional[EmaTeacher], epoch: int, seed: int,
                    best_params: Optional[NetworkParams] = None,
                    best_epoch: int = -1,
                    best_val_dice: float = float("-inf")) -> None:
    sections: list[tuple[str, np.ndarray]] = []
    for name, t in params.named_tensors():
        sections.append((f"param/{name}", t.data))
    for name, buf in state.buffers.items():
        sections.append((f"opt/{name}", buf))
    if teacher is not None:
        for name, t in teacher.params.named_tensors():
            sections.append((f"teacher/{name}", t.data))
    if best_params is not None:
        for name, t in best_params.named_tensors():
            sections.append((f"best/{name}", t.data))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", epoch))
        fh.write(struct.pack("<q", seed))
        fh.write(struct.pack("<q", best_epoch))
        fh.write(struct.pack("<d", best_val_dice))
        fh.write(struct.pack("<I", len(sections)))
        for name, arr in sections:
            write_array_record(fh, name, arr)


def checkpoint_load(path) -> CheckpointState:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ParamFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        header = fh.read(4 + 8 + 8 + 8 + 8 + 4)
        if len(header) != 40:
            raise ParamFormatError("truncated checkpoint header")
        version, epoch, seed, best_epoch, best_dice, count = struct.unpack(
            "<IQqqdI", header)
        if version != CHECKPOINT_VERSION:
            raise ParamFormatError(f"unsupported checkpoint version {version}")
        groups: dict[str, dict[str, np.ndarray]] = {}
        for _ in range(count):
            name, arr = read_array_record(fh)
            prefix, _, rest = name.partition("/")
            if prefix not in ("param", "opt", "teacher", "best") or not rest:
                raise ParamFormatError(f"unexpected checkpoint array {name!r}")
            groups.setdefault(prefix, {})[rest] = arr
    if "param" not in groups:
        raise ParamFormatError("checkpoint has no parameter section")
    params = params_from_arrays(groups["param"])
    state = OptimizerState(
        {name: groups.get("opt", {}).get(name) for name, _ in params.named_tensors()})
    for name, buf in state.buffers.items():
        if buf is None:
            raise ParamFormatError(f"missing optimizer array {name!r}")
    teacher_params = (params_from_arrays(groups["teacher"])
                      if "teacher" in groups else None)
    if teacher_params is not None:
        for _, t in teacher_params.named_tensors():
            t.requires_grad = False
    best_params = params_from_arrays(groups["best"]) if "best" in groups else None
    return CheckpointState(params=params, opt_state=state,
                           teacher_params=teacher_params, epoch=epoch,
                           seed=seed, best_params=best_params,
                           best_epoch=best_epoch, best_val_dice=best_dice)
