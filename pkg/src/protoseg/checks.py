"""Finite-difference verification suite: every differentiable primitive,
every loss term, and the full training objective end to end.

All checks run in float64. Points are nudged away from the kink points of
relu/max-pooling and away from probability clamps and the pseudo-label
threshold, so central differences see a smooth function.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import losses as lossmod
from .autodiff import (GradCheckReport, Tensor, add, clamp_min,
                       channel_linear, concat_channels, conv2d,
                       finite_diff_gradcheck, log, matmul2, maxpool2x2, mul,
                       reduce, relu, softmax_channels, sum_all,
                       upsample_nearest2x2)
from .data import DatasetSpec, render_sample
from .network import (NetConfig, aggregate_classes, build_mapping,
                      forward_features, init_params, over_seg_probs)

KINK_MARGIN = 2e-2


def _rng(tag: int) -> np.random.Generator:
    return np.random.default_rng((977, tag))


def _projection(shape, tag: int) -> Tensor:
    """Frozen random weights turning a tensor-valued op into a scalar."""
    return Tensor(_rng(tag).normal(size=shape))


def _away_from(x: np.ndarray, value: float, margin: float = KINK_MARGIN) -> np.ndarray:
    """Push entries within ``margin`` of ``value`` to a safe distance."""
    out = x.copy()
    close = np.abs(out - value) < margin
    out[close] = value + np.where(out[close] >= value, margin, -margin) * 2
    return out


def _separated_windows(x: np.ndarray, margin: float = KINK_MARGIN) -> np.ndarray:
    """Make each 2x2 pooling window's maximum win by at least ``margin``."""
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4).copy()
    idx = win.argmax(axis=4)
    np.put_along_axis(win, idx[..., None],
                      np.take_along_axis(win, idx[..., None], axis=4) + 2 * margin,
                      axis=4)
    win = win.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win.reshape(b, c, h, w))


def _simplex(shape, tag: int, sharpness: float = 1.5) -> np.ndarray:
    """Random per-pixel probabilities bounded away from 0 and 1."""
    z = _rng(tag).normal(size=shape) * sharpness
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return 0.9 * p + 0.1 / shape[1]  # keep mass away from the log clamp


def _check(name: str, fn: Callable[[Tensor], Tensor], point: np.ndarray,
           step: float, tolerance: float) -> GradCheckReport:
    report = finite_diff_gradcheck(fn, Tensor(point.astype(np.float64)),
                                   step=step, tolerance=tolerance, op_name=name)
    return report


def primitive_checks(step: float, tolerance: float) -> list[GradCheckReport]:
    out = []
    x = _rng(1).normal(size=(2, 2, 6, 6))
    k = _rng(2).normal(size=(3, 2, 3, 3))
    b = _rng(3).normal(size=3)
    proj = _projection((2, 3, 6, 6), 4)
    kt, bt = Tensor(k), Tensor(b)
    xt = Tensor(x)
    out.append(_check("conv2d/input",
                      lambda t: sum_all(mul(conv2d(t, kt, bt), proj)), x,
                      step, tolerance))
    out.append(_check("conv2d/kernel",
                      lambda t: sum_all(mul(conv2d(xt, t, bt), proj)), k,
                      step, tolerance))
    out.append(_check("conv2d/bias",
                      lambda t: sum_all(mul(conv2d(xt, kt, t), proj)), b,
                      step, tolerance))

    xr = _away_from(_rng(5).normal(size=(2, 3, 4, 4)), 0.0)
    pr = _projection(xr.shape, 6)
    out.append(_check("relu", lambda t: sum_all(mul(relu(t), pr)), xr,
                      step, tolerance))

    xm = _separated_windows(_rng(7).normal(size=(2, 2, 6, 6)))
    pm = _projection((2, 2, 3, 3), 8)
    out.append(_check("maxpool2x2",
                      lambda t: sum_all(mul(maxpool2x2(t), pm)), xm,
                      step, tolerance))

    xu = _rng(9).normal(size=(2, 3, 3, 3))
    pu = _projection((2, 3, 6, 6), 10)
    out.append(_check("upsample_nearest2x2",
                      lambda t: sum_all(mul(upsample_nearest2x2(t), pu)), xu,
                      step, tolerance))

    ca = _rng(11).normal(size=(2, 2, 4, 4))
    cb = _rng(12).normal(size=(2, 3, 4, 4))
    pc = _projection((2, 5, 4, 4), 13)
    cat = Tensor(ca)
    cbt = Tensor(cb)
    out.append(_check("concat_channels/a",
                      lambda t: sum_all(mul(concat_channels(t, cbt), pc)), ca,
                      step, tolerance))
    out.append(_check("concat_channels/b",
                      lambda t: sum_all(mul(concat_channels(cat, t), pc)), cb,
                      step, tolerance))

    feats = _rng(14).normal(size=(2, 4, 4, 4))
    weight = _rng(15).normal(size=(4, 6))
    pl = _projection((2, 6, 4, 4), 16)
    ft, wt = Tensor(feats), Tensor(weight)
    out.append(_check("channel_linear/features",
                      lambda t: sum_all(mul(channel_linear(t, wt), pl)), feats,
                      step, tolerance))
    out.append(_check("channel_linear/weight",
                      lambda t: sum_all(mul(channel_linear(ft, t), pl)), weight,
                      step, tolerance))

    zs = _rng(17).normal(size=(2, 4, 3, 3)) * 2
    ps = _projection(zs.shape, 18)
    out.append(_check("softmax_channels",
                      lambda t: sum_all(mul(softmax_channels(t), ps)), zs,
                      step, tolerance))

    xs = _rng(19).normal(size=(2, 3, 4, 4))
    psum = _projection((3, 4), 20)
    out.append(_check("reduce_sum",
                      lambda t: sum_all(mul(reduce(t, "sum", axes=(0, 3)), psum)),
                      xs, step, tolerance))
    out.append(_check("reduce_mean",
                      lambda t: reduce(t, "mean"), xs, step, tolerance))

    ea = _rng(21).normal(size=(3, 5))
    eb = _rng(22).normal(size=(3, 5))
    ebt = Tensor(eb)
    out.append(_check("add", lambda t: sum_all(mul(add(t, ebt), Tensor(ea))),
                      ea, step, tolerance))
    out.append(_check("mul", lambda t: sum_all(mul(mul(t, ebt), ebt)), ea,
                      step, tolerance))
    xl = np.abs(_rng(23).normal(size=(3, 4))) + 0.5
    out.append(_check("log", lambda t: sum_all(log(t)), xl, step, tolerance))
    xc = _away_from(_rng(24).normal(size=(3, 4)), 0.3)
    pcl = _projection((3, 4), 25)
    out.append(_check("clamp_min",
                      lambda t: sum_all(mul(clamp_min(t, 0.3), pcl)), xc,
                      step, tolerance))
    ma = _rng(26).normal(size=(3, 4))
    mb = _rng(27).normal(size=(4, 2))
    pm2 = _projection((3, 2), 28)
    mbt = Tensor(mb)
    out.append(_check("matmul2",
                      lambda t: sum_all(mul(matmul2(t, mbt), pm2)), ma,
                      step, tolerance))
    return out


def loss_checks(step: float, tolerance: float) -> list[GradCheckReport]:
    out = []
    shape = (2, 4, 4, 4)
    y = np.zeros(shape)
    labels = _rng(30).integers(0, 4, size=(2, 4, 4))
    for b in range(2):
        for i in range(4):
            for j in range(4):
                y[b, labels[b, i, j], i, j] = 1.0
    yt = Tensor(y)
    f = _simplex(shape, 31)
    out.append(_check("ce_loss", lambda t: lossmod.ce_loss(yt, t), f,
                      step, tolerance))

    p = _simplex(shape, 32)
    out.append(_check("entropy", lambda t: lossmod.entropy(t), p,
                      step, tolerance))
    out.append(_check("entropy_min_loss",
                      lambda t: lossmod.entropy_min_loss(t), p, step, tolerance))

    fprime = _simplex((2, 6, 4, 4), 33)
    out.append(_check("mi_loss", lambda t: lossmod.mi_loss(t), fprime,
                      step, tolerance))

    w = _rng(34).normal(size=(4, 6))
    out.append(_check("orth_loss", lambda t: lossmod.orth_loss(t), w,
                      step, tolerance))

    fp = _pseudo_label_point((1, 3, 4, 4), threshold=0.6)
    out.append(_check("pseudo_label_loss",
                      lambda t: lossmod.pseudo_label_loss(t, 0.6), fp,
                      step, tolerance))

    student = _simplex(shape, 36)
    teacher = Tensor(_simplex(shape, 37))
    out.append(_check("consistency_loss",
                      lambda t: lossmod.consistency_loss(t, teacher), student,
                      step, tolerance))
    return out


def _pseudo_label_point(shape, threshold: float, margin: float = 0.03) -> np.ndarray:
    """Simplex batch whose per-pixel max is separated from the threshold and
    from the runner-up, so the confident mask and argmax are stable."""
    for tag in range(38, 138):
        p = _simplex(shape, tag, sharpness=3.0)
        top = np.sort(p, axis=1)
        maxp, second = top[:, -1], top[:, -2]
        if (np.abs(maxp - threshold) > margin).all() and (maxp - second > margin).all():
            return p
    raise RuntimeError("could not build a margin-separated pseudo-label point")


def _graph_nodes(root: Tensor):
    seen = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        yield t
        stack.extend(t.parents)


def _smooth_at(root: Tensor, margin: float) -> bool:
    """True when no relu input sits within ``margin`` of its kink and no
    pooling window has a contested positive maximum, so every perturbation
    smaller than ``margin`` sees a smooth function."""
    for node in _graph_nodes(root):
        if node.op == "relu":
            if np.abs(node.parents[0].data).min() < margin:
                return False
        elif node.op == "maxpool2x2":
            x = node.parents[0].data
            b, c, h, w = x.shape
            win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            top = np.sort(win.reshape(b, c, h // 2, w // 2, 4), axis=-1)
            contested = (top[..., -2] > 0) & (top[..., -1] - top[..., -2] < margin)
            if contested.any():
                return False
    return True


def _micro_setup(margin: float = 1e-3):
    """Tiny but complete model + batch for the end-to-end objective check.

    The init seed is searched so the objective is smooth in a ``margin``
    neighbourhood of the chosen parameters (no relu/pool kink crossings
    under finite-difference perturbations)."""
    spec = DatasetSpec(num_images=2, image_size=8, noise_sigma=0.1, seed=5)
    net = NetConfig(num_classes=2, base_channels=2, prototypes_per_class=2)
    mapping = build_mapping(net.num_classes, net.prototypes_per_class)
    samples = [render_sample(spec, i) for i in range(2)]
    images = Tensor(np.stack([s.image for s in samples]).astype(np.float64))
    eye = np.eye(net.num_classes)
    targets = Tensor(np.stack([np.ascontiguousarray(eye[s.mask].transpose(2, 0, 1))
                               for s in samples]))
    for seed in range(500):
        params = init_params(net, seed=seed).astype(np.float64)
        probe = over_seg_probs(params, forward_features(params, images))
        if _smooth_at(probe, margin):
            return params, mapping, images, targets
    raise RuntimeError("no kink-free parameter draw found for the end-to-end check")


def total_objective_checks(step: float, tolerance: float) -> list[GradCheckReport]:
    """Gradient of the full weighted objective w.r.t. every parameter array."""
    params, mapping, images, targets = _micro_setup()
    weights = lossmod.LossWeights()

    def objective(p) -> Tensor:
        f_prime = over_seg_probs(p, forward_features(p, images))
        f = aggregate_classes(f_prime, mapping)
        sup = lossmod.ce_loss(targets, f)
        mi = lossmod.mi_loss(f_prime)
        orth = lossmod.orth_loss(p.head)
        total, _ = lossmod.total_loss(sup, mi, orth, None, weights, ramp=1.0)
        return total

    reports = []
    for name, tensor in params.named_tensors():
        def fn(t, target_name=name):
            trial = params.astype(np.float64)
            _set_named(trial, target_name, t)
            return objective(trial)

        reports.append(finite_diff_gradcheck(
            fn, Tensor(tensor.data.copy()), step=step, tolerance=tolerance,
            op_name=f"total_objective/{name}"))
    return reports


def _set_named(params, name: str, tensor: Tensor) -> None:
    if name == "head":
        params.head = tensor
        return
    layer, _, part = name.partition(".")
    if part == "kernel":
        params.kernels[layer] = tensor
    else:
        params.biases[layer] = tensor


def run_suite(step: float = 1e-4, tolerance: float = 1e-5) -> list[GradCheckReport]:
    reports = primitive_checks(step, tolerance)
    reports += loss_checks(step, tolerance)
    reports += total_objective_checks(step, tolerance)
    return reports
