import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from filsynth import data
from filsynth.data import (
    DatasetSpec,
    apply_mask,
    bicubic_resize,
    generate_synthetic_micro_dataset,
    postprocess,
    preprocess,
    psnr,
    to_uint8,
)


def raw_fixture(h, w, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    gt = (rng.uniform(size=(h, w)) > 0.8).astype(np.uint8) * 255
    return img, gt


# ------------------------------------------------------------------ resize

def test_resize_identity_and_constant():
    img = np.random.default_rng(0).normal(size=(3, 7, 9))
    np.testing.assert_array_equal(bicubic_resize(img, 7, 9), img)
    np.testing.assert_allclose(bicubic_resize(np.full((2, 5, 6), 0.3), 11, 4), 0.3, atol=1e-12)


def test_resize_rejects_nonpositive():
    with pytest.raises(ValueError):
        bicubic_resize(np.zeros((4, 4)), 0, 4)


def test_ramp_upscale_reproduces_ramp():
    n = 16
    ramp = np.tile(np.arange(n, dtype=np.float64) * 0.1 - 0.5, (n, 1))
    up = bicubic_resize(ramp, 2 * n, 2 * n)
    centers = (np.arange(2 * n) + 0.5) / 2 - 0.5
    expected = centers * 0.1 - 0.5
    interior = slice(4, 2 * n - 4)
    assert np.abs(up[interior, interior] - expected[interior]).max() < 1e-3


# -------------------------------------------------------------- preprocess

def test_drive_crop_then_resize():
    img, gt = raw_fixture(584, 565)
    pair = preprocess(img, gt, kind="drive-like", target_size=64)
    assert pair.image.shape == (3, 64, 64)
    assert pair.original_size == (584, 565)
    top = (584 - 565) // 2
    crop = img[top:top + 565]
    direct = bicubic_resize(data.to_unit_range(crop).transpose(2, 0, 1), 64, 64)
    np.testing.assert_allclose(pair.image, np.clip(direct, -1, 1), atol=1e-6)


def test_crop_window_larger_than_image_rejected():
    img, gt = raw_fixture(40, 50)
    with pytest.raises(ValueError, match="crop"):
        preprocess(img, gt, kind="drive-like", target_size=32, crop_size=45)


def test_target_sized_input_passes_through():
    img, gt = raw_fixture(32, 32)
    pair = preprocess(img, gt, kind="stare-like", target_size=32)
    np.testing.assert_allclose(pair.image, data.to_unit_range(img).transpose(2, 0, 1), atol=1e-6)
    np.testing.assert_array_equal(pair.segmentation[0] > 0, gt > 0)


def test_unknown_kind_and_mismatched_gt():
    img, gt = raw_fixture(16, 16)
    with pytest.raises(ValueError):
        preprocess(img, gt, kind="ct-like")
    with pytest.raises(ValueError):
        preprocess(img, gt[:8], kind="stare-like")


@settings(max_examples=25, deadline=None)
@given(st.integers(8, 80), st.integers(8, 80), st.sampled_from(data.KINDS), st.sampled_from([8, 16, 32]))
def test_preprocess_output_invariants(h, w, kind, target):
    img, gt = raw_fixture(h, w, seed=h * w)
    pair = preprocess(img, gt, kind=kind, target_size=target)
    assert pair.image.shape == (3, target, target)
    assert pair.image.min() >= -1 and pair.image.max() <= 1
    assert set(np.unique(pair.segmentation)) <= {-1.0, 1.0}


# ------------------------------------------------------------------- masks

def test_apply_mask_examples():
    img = np.random.default_rng(0).uniform(-1, 1, (3, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(apply_mask(img, np.ones((1, 5, 5))), img)
    assert (apply_mask(img, np.zeros((5, 5))) == -1).all()
    m = np.random.default_rng(1).uniform(size=(5, 5)) > 0.5
    once = apply_mask(img, m)
    np.testing.assert_array_equal(apply_mask(once, m), once)


def test_derive_mask_keeps_largest_bright_component():
    raw = np.zeros((20, 20, 3), np.uint8)
    raw[2:15, 2:15] = 200
    raw[6:9, 6:9] = 0  # dark hole is filled
    raw[17:19, 17:19] = 200  # small blob dropped
    m = data.derive_mask(raw)
    assert m[7, 7] and m[2, 2] and not m[18, 18]


# ------------------------------------------------------------- postprocess

def test_value_mapping_endpoints():
    np.testing.assert_array_equal(to_uint8(np.array([-1.0, 0.0, 1.0])), [0, 128, 255])


def test_postprocess_size_and_mask():
    phantom = np.random.default_rng(0).uniform(-1, 1, (3, 16, 16))
    mask = data.circular_mask(16)
    out = postprocess(phantom, (40, 37), mask)
    assert out.shape == (40, 37, 3) and out.dtype == np.uint8
    outside = data.nearest_resize(mask[0], 40, 37) < 0.5
    assert outside.any() and (out[outside] == 0).all()


def test_round_trip_psnr_on_micro_images():
    for pair in generate_synthetic_micro_dataset(4, 128, seed=2):
        raw = to_uint8(pair.image).transpose(1, 2, 0)
        small = preprocess(raw, (pair.segmentation[0] > 0).astype(np.uint8), kind="stare-like", target_size=64)
        back = postprocess(small.image, small.original_size)
        assert back.shape == raw.shape
        assert psnr(raw, back) > 25


def test_psnr_examples():
    a = np.zeros((4, 4))
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 255) == 0


# -------------------------------------------------------------------- micro

def test_micro_dataset_properties():
    pairs = generate_synthetic_micro_dataset(6, 64, seed=3)
    again = generate_synthetic_micro_dataset(6, 64, seed=3)
    for p, q in zip(pairs, again):
        assert p.image.tobytes() == q.image.tobytes()
        fg = p.segmentation[0] > 0
        assert 0.01 < fg.mean() < 0.3
        lum = p.image.mean(axis=0)
        assert lum[fg].mean() < lum[~fg].mean()  # filaments render darker
        p.check()


# -------------------------------------------------------------------- files

def test_load_dataset_pairs_by_stem(tmp_path):
    for sub in ("images", "gt"):
        (tmp_path / sub).mkdir()
    for stem in ("a", "b"):
        img, gt = raw_fixture(20, 24, seed=ord(stem))
        data.write_png(tmp_path / "images" / f"{stem}.png", img)
        data.write_png(tmp_path / "gt" / f"{stem}.png", gt)
    pairs = data.load_dataset(DatasetSpec(str(tmp_path), kind="stare-like", target_size=16))
    assert [p.id for p in pairs] == ["a", "b"]
    assert pairs[0].original_size == (20, 24)
    data.write_png(tmp_path / "images" / "c.png", img)
    with pytest.raises(ValueError, match="unpaired"):
        data.load_dataset(DatasetSpec(str(tmp_path)))


def test_unreadable_png(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(ValueError, match="cannot read"):
        data.read_png(bad)
