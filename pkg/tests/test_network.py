"""Network tests: init statistics, shape contracts, mapping/aggregation
algebra, prediction determinism, and the parameter file format."""

import numpy as np
import pytest

from protoseg.autodiff import Tensor, backward, mean_all, finite_diff_gradcheck
from protoseg.checks import _smooth_at
from protoseg.network import (NetConfig, ParamFormatError, aggregate_classes,
                              build_mapping, forward_features, init_params,
                              load_params, over_seg_probs, predict,
                              save_params)


def _cfg(**kw):
    base = dict(num_classes=2, base_channels=4, prototypes_per_class=3)
    base.update(kw)
    return NetConfig(**base)


def test_init_deterministic_and_seed_sensitive():
    cfg = _cfg()
    a = init_params(cfg, seed=3)
    b = init_params(cfg, seed=3)
    c = init_params(cfg, seed=4)
    for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert na == nb and (ta.data == tb.data).all()
    assert any((ta.data != tc.data).any()
               for (_, ta), (_, tc) in zip(a.named_tensors(), c.named_tensors()))


def test_init_he_scale_and_zero_bias():
    cfg = _cfg(base_channels=8)
    params = init_params(cfg, seed=0)
    k = params.kernels["bot_b"].data  # 32x32x3x3 = 9216 >= 1000 samples
    fan_in = k.shape[1] * 9
    expected = np.sqrt(2.0 / fan_in)
    assert abs(k.std() - expected) / expected < 0.10
    assert (params.biases["bot_b"].data == 0).all()
    w = params.head.data
    assert w.shape == (8, 6)


def test_forward_shape_contract_and_divisibility():
    cfg = _cfg(base_channels=8)
    params = init_params(cfg, seed=1)
    images = Tensor(np.random.default_rng(0).normal(size=(2, 1, 16, 16))
                    .astype(np.float32))
    feats = forward_features(params, images)
    assert feats.shape == (2, 8, 16, 16)
    with pytest.raises(ValueError, match="divisible"):
        forward_features(params, Tensor(np.zeros((1, 1, 6, 6))))


def test_zero_params_give_zero_features():
    cfg = _cfg()
    params = init_params(cfg, seed=1)
    for _, t in params.named_tensors():
        t.data[...] = 0.0
    feats = forward_features(params, Tensor(np.random.default_rng(1)
                                            .normal(size=(1, 1, 8, 8))
                                            .astype(np.float32)))
    assert (feats.data == 0).all()


def test_feature_gradcheck_wrt_kernel():
    cfg = _cfg(base_channels=2)
    images = Tensor(np.random.default_rng(2).normal(size=(1, 1, 8, 8)))
    params = None
    for seed in range(200):  # draw away from relu/pool kinks
        candidate = init_params(cfg, seed).astype(np.float64)
        if _smooth_at(forward_features(candidate, images), 1e-3):
            params = candidate
            break
    assert params is not None

    def fn(t):
        params.kernels["enc2a"] = t
        return mean_all(forward_features(params, images))

    report = finite_diff_gradcheck(fn, Tensor(params.kernels["enc2a"].data.copy()),
                                   tolerance=1e-5, op_name="features/kernel")
    assert report.passed, report


def test_over_seg_probs_normalization_and_uniform():
    cfg = _cfg()
    params = init_params(cfg, seed=5)
    feats = forward_features(params, Tensor(np.random.default_rng(3)
                                            .normal(size=(2, 1, 8, 8))
                                            .astype(np.float32)))
    probs = over_seg_probs(params, feats)
    assert np.abs(probs.data.sum(axis=1) - 1.0).max() < 1e-6
    params.head.data[...] = 0.0
    probs0 = over_seg_probs(params, feats)
    assert np.allclose(probs0.data, 1.0 / cfg.num_prototypes, atol=1e-7)


def test_aligned_feature_wins_prototype():
    w = Tensor(np.eye(4, dtype=np.float32))  # orthonormal, N = C' = 4
    feats = np.zeros((1, 4, 2, 2), dtype=np.float32)
    feats[0, 2] = 100.0
    from protoseg.autodiff import channel_linear, softmax_channels
    probs = softmax_channels(channel_linear(Tensor(feats), w))
    assert (probs.data[0, 2] > 0.99).all()


def test_build_mapping_blocks_and_columns():
    ident = build_mapping(2, 1)
    assert (ident.matrix == np.eye(2)).all()
    m = build_mapping(2, 3).matrix
    assert (m[:3, 0] == 1).all() and (m[3:, 1] == 1).all()
    assert m.sum() == 6
    for c, p in [(2, 1), (2, 3), (3, 2), (3, 5)]:
        mm = build_mapping(c, p).matrix
        assert (mm.sum(axis=1) == 1).all()       # one class per prototype
        assert (mm.sum(axis=0) == p).all()       # equal prototypes per class


def test_aggregate_identity_blocks_and_partition():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(2, 6, 3, 3))
    e = np.exp(z)
    f_prime = Tensor((e / e.sum(axis=1, keepdims=True)).astype(np.float32))
    ident = aggregate_classes(Tensor(f_prime.data[:, :2]), build_mapping(2, 1))
    assert (ident.data == f_prime.data[:, :2]).all()
    onehot = np.zeros((1, 6, 1, 1), dtype=np.float32)
    onehot[0, 4] = 1.0
    f = aggregate_classes(Tensor(onehot), build_mapping(2, 3))
    assert f.data[0, 1, 0, 0] == 1.0 and f.data[0, 0, 0, 0] == 0.0
    agg = aggregate_classes(f_prime, build_mapping(2, 3))
    assert np.abs(agg.data.sum(axis=1) - 1.0).max() < 1e-6
    with pytest.raises(ValueError, match="mapping rows"):
        aggregate_classes(f_prime, build_mapping(2, 2))


def test_predict_definitions_and_ranges():
    cfg = _cfg()
    params = init_params(cfg, seed=6)
    mapping = build_mapping(cfg.num_classes, cfg.prototypes_per_class)
    images = Tensor(np.random.default_rng(5).normal(size=(2, 1, 8, 8))
                    .astype(np.float32))
    f_prime, f, hard_over, hard = predict(params, mapping, images)
    assert (hard == f.data.argmax(axis=1)).all()
    assert hard_over.min() >= 0 and hard_over.max() < cfg.num_prototypes
    assert hard.min() >= 0 and hard.max() < cfg.num_classes
    # P=1: over-segmentation and class maps coincide
    cfg1 = _cfg(prototypes_per_class=1)
    params1 = init_params(cfg1, seed=6)
    m1 = build_mapping(cfg1.num_classes, 1)
    _, _, over1, hard1 = predict(params1, m1, images)
    assert (over1 == hard1).all()


def test_within_class_column_permutation_leaves_classes_unchanged():
    cfg = _cfg()
    params = init_params(cfg, seed=7)
    mapping = build_mapping(cfg.num_classes, cfg.prototypes_per_class)
    images = Tensor(np.random.default_rng(6).normal(size=(2, 1, 8, 8))
                    .astype(np.float32))
    _, f, _, _ = predict(params, mapping, images)
    permuted = params.copy()
    permuted.head.data[:, [0, 1, 2]] = permuted.head.data[:, [2, 0, 1]]
    permuted.head.data[:, [3, 5]] = permuted.head.data[:, [5, 3]]
    _, f2, _, _ = predict(permuted, mapping, images)
    assert np.abs(f.data - f2.data).max() <= 1e-6


def test_single_prototype_head_is_plain_softmax():
    cfg = _cfg(prototypes_per_class=1)
    params = init_params(cfg, seed=8)
    mapping = build_mapping(cfg.num_classes, 1)
    images = Tensor(np.random.default_rng(7).normal(size=(1, 1, 8, 8))
                    .astype(np.float32))
    from protoseg.autodiff import channel_linear, softmax_channels, no_grad
    with no_grad():
        feats = forward_features(params, images)
        direct = softmax_channels(channel_linear(feats, params.head))
    _, f, _, _ = predict(params, mapping, images)
    assert (f.data == direct.data).all()


def test_class_prob_gradcheck_wrt_head():
    cfg = _cfg(base_channels=2, prototypes_per_class=2)
    params = init_params(cfg, seed=9).astype(np.float64)
    mapping = build_mapping(cfg.num_classes, cfg.prototypes_per_class)
    images = Tensor(np.random.default_rng(8).normal(size=(1, 1, 8, 8)))
    feats = forward_features(params, images)
    feats_const = Tensor(feats.data)

    def fn(t):
        return mean_all(aggregate_classes(over_seg_probs(
            type(params)(kernels=params.kernels, biases=params.biases, head=t),
            feats_const), mapping))

    report = finite_diff_gradcheck(fn, Tensor(params.head.data.copy()),
                                   tolerance=1e-5, op_name="dmean(f)/dW")
    assert report.passed, report


def test_param_file_roundtrip_and_diagnostics(tmp_path):
    cfg = _cfg()
    params = init_params(cfg, seed=10)
    path = tmp_path / "weights.pseg"
    save_params(path, params)
    loaded = load_params(path)
    for (na, ta), (nb, tb) in zip(params.named_tensors(), loaded.named_tensors()):
        assert na == nb and (ta.data == tb.data).all()

    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XSEG"
    bad = tmp_path / "bad_magic.pseg"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ParamFormatError, match="bad magic"):
        load_params(bad)

    trunc = tmp_path / "trunc.pseg"
    trunc.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ParamFormatError, match="truncated"):
        load_params(trunc)

    vers = bytearray(path.read_bytes())
    vers[4] = 9
    vbad = tmp_path / "vers.pseg"
    vbad.write_bytes(bytes(vers))
    with pytest.raises(ParamFormatError, match="version"):
        load_params(vbad)
