"""Synthetic-data tests: determinism, render levels and modes, splits,
augmentation, pixel-frequency bounds, and the tensor file format."""

import numpy as np
import pytest

from protoseg.data import (BACKGROUND, BRIGHT_FILL, DatasetSpec, Sample,
                           TensorFileError, augment, flip_horizontal,
                           load_tensor_file, render_sample, save_tensor_file,
                           split)


def _spec(**kw):
    base = dict(num_images=50, image_size=32, num_classes=2,
                modes_per_class=2, noise_sigma=0.1, seed=9)
    base.update(kw)
    return DatasetSpec(**base)


def test_render_bit_identical():
    spec = _spec()
    a = render_sample(spec, 7)
    b = render_sample(spec, 7)
    assert (a.image == b.image).all() and (a.mask == b.mask).all()
    c = render_sample(spec, 8)
    assert (a.image != c.image).any()


def test_noiseless_mode0_has_two_levels_and_mask_matches_support():
    spec = _spec(noise_sigma=0.0)
    levels_bg = np.float32(BACKGROUND)
    levels_fill = np.float32(BRIGHT_FILL)
    found_mode0 = False
    for idx in range(40):
        s = render_sample(spec, idx)
        values = set(np.unique(s.image).tolist())
        assert levels_bg in {np.float32(v) for v in values}
        if values == {float(levels_bg), float(levels_fill)}:
            found_mode0 = True
            assert ((s.image[0] == levels_fill) == (s.mask == 1)).all()
    assert found_mode0, "no uniform-bright sample among the first 40"


def test_both_appearance_modes_occur_over_100_samples():
    spec = _spec(noise_sigma=0.0, num_images=100)
    bright_only = 0
    rimmed = 0
    for idx in range(100):
        s = render_sample(spec, idx)
        values = set(np.round(np.unique(s.image).astype(float), 4).tolist())
        if values == {0.2, 0.8}:
            bright_only += 1
        elif 0.9 in values:
            rimmed += 1
    assert bright_only > 0 and rimmed > 0
    assert bright_only + rimmed == 100


def test_threshold_recovers_mask_in_noiseless_limit():
    spec = _spec(noise_sigma=0.0)
    for idx in range(20):
        s = render_sample(spec, idx)
        recovered = (s.image[0] > 0.3).astype(np.uint8)
        assert (recovered == (s.mask > 0)).all()


def test_class_pixel_frequency_bounds():
    spec = _spec(num_images=200, num_classes=3)
    fractions = np.zeros(3)
    for idx in range(200):
        s = render_sample(spec, idx)
        for k in (1, 2):
            fractions[k] += (s.mask == k).mean()
    fractions /= 200
    for k in (1, 2):
        assert 0.03 <= fractions[k] <= 0.40


def test_split_contract():
    spec = _spec(num_images=30)
    s = split(spec, num_labeled=5, split_seed=1)
    assert len(s.labeled_ids) == 5
    assert set(s.labeled_ids).isdisjoint(s.unlabeled_ids)
    assert sorted(s.labeled_ids + s.unlabeled_ids) == list(range(30))
    # labeled set covers every class
    seen = set()
    for i in s.labeled_ids:
        seen.update(np.unique(render_sample(spec, i).mask).tolist())
    assert seen == {0, 1}


def test_split_full_supervision_has_empty_unlabeled():
    spec = _spec(num_images=12)
    s = split(spec, num_labeled=12, split_seed=2)
    assert s.unlabeled_ids == [] and len(s.labeled_ids) == 12


def test_split_seed_sensitivity():
    spec = _spec(num_images=40)
    picks = {tuple(split(spec, 4, split_seed=k).labeled_ids) for k in range(10)}
    assert len(picks) >= 2


def test_split_bad_count_rejected():
    spec = _spec(num_images=10)
    with pytest.raises(ValueError, match="num_labeled"):
        split(spec, 0, split_seed=0)
    with pytest.raises(ValueError, match="num_labeled"):
        split(spec, 11, split_seed=0)


def test_flip_is_involution_and_mask_consistent():
    spec = _spec()
    s = render_sample(spec, 3)
    flipped = flip_horizontal(s)
    twice = flip_horizontal(flipped)
    assert (twice.image == s.image).all() and (twice.mask == s.mask).all()
    w = s.mask.shape[1]
    for j in range(w):
        assert (flipped.mask[:, j] == s.mask[:, w - 1 - j]).all()


def test_augment_never_touches_mask_values():
    spec = _spec()
    s = render_sample(spec, 4)
    for k in range(10):
        out = augment(s, np.random.default_rng(k), spec.noise_sigma)
        assert out.mask.dtype == s.mask.dtype
        assert sorted(np.unique(out.mask)) == sorted(np.unique(s.mask))
        assert out.mask.sum() == s.mask.sum()


def test_augment_deterministic_given_rng():
    spec = _spec()
    s = render_sample(spec, 5)
    a = augment(s, np.random.default_rng(77), spec.noise_sigma)
    b = augment(s, np.random.default_rng(77), spec.noise_sigma)
    assert (a.image == b.image).all()


# ---------------------------------------------------------------------------
# SSEG files

def test_sseg_roundtrip_float_and_mask(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(1, 8, 8)).astype(np.float32)
    p = tmp_path / "img.sseg"
    save_tensor_file(p, arr)
    assert (load_tensor_file(p) == arr).all()
    mask = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
    pm = tmp_path / "mask.sseg"
    save_tensor_file(pm, mask)
    back = load_tensor_file(pm)
    assert back.dtype == np.uint8 and (back == mask).all()


def test_sseg_corruption_diagnostics(tmp_path):
    arr = np.zeros((2, 2), dtype=np.float32)
    p = tmp_path / "ok.sseg"
    save_tensor_file(p, arr)
    raw = p.read_bytes()

    bad_magic = tmp_path / "magic.sseg"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(TensorFileError, match="bad magic"):
        load_tensor_file(bad_magic)

    bad_tag = tmp_path / "tag.sseg"
    raw_tag = bytearray(raw)
    raw_tag[8] = 42
    bad_tag.write_bytes(bytes(raw_tag))
    with pytest.raises(TensorFileError, match="dtype tag"):
        load_tensor_file(bad_tag)

    trunc = tmp_path / "trunc.sseg"
    trunc.write_bytes(raw[:-3])
    with pytest.raises(TensorFileError, match="payload"):
        load_tensor_file(trunc)

    with pytest.raises(TensorFileError, match="rank"):
        save_tensor_file(tmp_path / "r5.sseg", np.zeros((1, 1, 1, 1, 1), np.float32))


def test_sseg_rejects_trailing_bytes(tmp_path):
    arr = np.zeros((2, 2), dtype=np.float32)
    p = tmp_path / "extra.sseg"
    save_tensor_file(p, arr)
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(TensorFileError, match="after payload"):
        load_tensor_file(p)
