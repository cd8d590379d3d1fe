"""Metrics tests: Dice algebra, evaluate() aggregation, and per-seed
report aggregation."""

import numpy as np
import pytest

import protoseg.metrics as metrics
from protoseg.data import DatasetSpec, render_sample
from protoseg.metrics import MetricsReport, dice, evaluate, seed_aggregate
from protoseg.network import NetConfig, build_mapping, init_params


def test_dice_perfect_and_disjoint():
    m = np.zeros((6, 6), dtype=np.uint8)
    m[1:3, 1:3] = 1
    assert dice(m, m, 1) == 1.0
    other = np.zeros_like(m)
    other[4:6, 4:6] = 1
    assert dice(m, other, 1) == 0.0


def test_dice_hand_counted_half():
    pred = np.zeros((4, 8), dtype=np.uint8)
    true = np.zeros((4, 8), dtype=np.uint8)
    pred[0, 0:8] = 1          # |P| = 8
    true[0, 4:8] = 1          # overlap 4
    true[1, 0:4] = 1          # |T| = 8
    assert dice(pred, true, 1) == pytest.approx(0.5)


def test_dice_bounds_over_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.integers(0, 3, size=(5, 5))
        b = rng.integers(0, 3, size=(5, 5))
        v = dice(a, b, 1)
        assert 0.0 <= v <= 1.0
        assert v == dice(b, a, 1)  # symmetry


def test_dice_empty_class_convention_and_relabeling():
    a = np.zeros((3, 3), dtype=np.uint8)
    b = np.zeros((3, 3), dtype=np.uint8)
    assert dice(a, b, 2) == 1.0
    rng = np.random.default_rng(1)
    p = rng.integers(0, 2, size=(6, 6))
    t = rng.integers(0, 2, size=(6, 6))
    swapped = dice(1 - p, 1 - t, 0)
    assert dice(p, t, 1) == pytest.approx(swapped)


def test_dice_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        dice(np.zeros((2, 2)), np.zeros((3, 3)), 0)


def _tiny_dataset(n=6):
    spec = DatasetSpec(num_images=n, image_size=8, noise_sigma=0.05, seed=3)
    return [render_sample(spec, i) for i in range(n)]


def test_evaluate_uniform_head_marginal():
    cfg = NetConfig(num_classes=2, base_channels=4, prototypes_per_class=3)
    params = init_params(cfg, seed=0)
    params.head.data[...] = 0.0
    mapping = build_mapping(2, 3)
    report = evaluate(params, mapping, _tiny_dataset(), cfg)
    assert np.allclose(report.marginal_over_prototypes, 1.0 / 6, atol=1e-6)
    assert report.marginal_entropy == pytest.approx(np.log(6), abs=1e-6)
    assert abs(sum(report.marginal_over_prototypes) - 1.0) < 1e-6


def test_evaluate_orthonormal_head_gram():
    cfg = NetConfig(num_classes=2, base_channels=6, prototypes_per_class=2)
    params = init_params(cfg, seed=1)
    q, _ = np.linalg.qr(np.random.default_rng(2).normal(size=(6, 4)))
    params.head.data[...] = q.astype(np.float32)
    report = evaluate(params, build_mapping(2, 2), _tiny_dataset(), cfg)
    assert report.gram_max_offdiag <= 1e-6
    assert report.gram_diag_deviation <= 1e-6


def test_evaluate_perfect_predictor_scores_one(monkeypatch):
    cfg = NetConfig(num_classes=2, base_channels=4, prototypes_per_class=1)
    params = init_params(cfg, seed=4)
    dataset = _tiny_dataset()
    cursor = {"i": 0}
    real_predict = metrics.predict

    def oracle_predict(p, m, images):
        f_prime, f, hard_over, _ = real_predict(p, m, images)
        n = images.shape[0]
        truth = np.stack([dataset[cursor["i"] + j].mask for j in range(n)])
        cursor["i"] += n
        return f_prime, f, hard_over, truth

    monkeypatch.setattr(metrics, "predict", oracle_predict)
    report = evaluate(params, build_mapping(2, 1), dataset, cfg)
    assert report.dice_per_class == [1.0, 1.0]
    assert report.mean_dice == 1.0


def test_evaluate_rejects_empty_and_unlabeled():
    cfg = NetConfig(num_classes=2, base_channels=4)
    params = init_params(cfg, seed=5)
    mapping = build_mapping(2, 3)
    with pytest.raises(ValueError, match="empty"):
        evaluate(params, mapping, [], cfg)
    bare = _tiny_dataset(2)
    bare[0].mask = None
    with pytest.raises(ValueError, match="mask"):
        evaluate(params, mapping, bare, cfg)


def _report(x):
    return MetricsReport(dice_per_class=[1.0, x], mean_dice=x,
                         marginal_over_prototypes=[0.5, 0.5],
                         marginal_entropy=x, gram_max_offdiag=x,
                         gram_diag_deviation=x)


def test_seed_aggregate_single_and_pairs():
    mean, std = seed_aggregate([_report(0.7)])
    assert mean.mean_dice == 0.7 and std.mean_dice == 0.0
    mean2, std2 = seed_aggregate([_report(0.4), _report(0.6)])
    assert mean2.mean_dice == pytest.approx(0.5)
    assert std2.mean_dice == pytest.approx(0.1)
    assert mean2.dice_per_class[1] == pytest.approx(0.5)
    mean3, std3 = seed_aggregate([_report(0.3)] * 3)
    assert std3.mean_dice == 0.0 and std3.marginal_entropy == 0.0
