import json

import numpy as np
import pytest

from lesionfuse.catalog import load_manifest
from lesionfuse.errors import ConfigError, DegenerateInputError, PreprocessError
from lesionfuse.preprocess import (IMAGENET_MEAN_RGB, PreprocessConfig, PreprocessedTensor,
                                   TensorCache, grayworld, materialize_cache,
                                   preprocess_array, preprocess_pipeline, resize_bicubic,
                                   subtract_mean)

from conftest import make_manifest_csv, write_png


# --- independent resampling oracles (direct 2-D evaluation, no separability) --

def _cubic(t, a=-0.5):
    t = abs(t)
    if t <= 1.0:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2.0:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def direct_bicubic(img, out_h, out_w):
    c, h, w = img.shape
    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        py = (i + 0.5) * h / out_h - 0.5
        by = int(np.floor(py))
        for j in range(out_w):
            px = (j + 0.5) * w / out_w - 0.5
            bx = int(np.floor(px))
            for ch in range(c):
                acc = 0.0
                for m in range(-1, 3):
                    wy = _cubic(py - (by + m))
                    yy = min(max(by + m, 0), h - 1)
                    for n in range(-1, 3):
                        wx = _cubic(px - (bx + n))
                        xx = min(max(bx + n, 0), w - 1)
                        acc += wy * wx * img[ch, yy, xx]
                out[ch, i, j] = acc
    return out


def direct_bilinear(img, out_h, out_w):
    c, h, w = img.shape
    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        py = min(max((i + 0.5) * h / out_h - 0.5, 0), h - 1)
        y0 = int(np.floor(py)); y1 = min(y0 + 1, h - 1); fy = py - y0
        for j in range(out_w):
            px = min(max((j + 0.5) * w / out_w - 0.5, 0), w - 1)
            x0 = int(np.floor(px)); x1 = min(x0 + 1, w - 1); fx = px - x0
            for ch in range(c):
                out[ch, i, j] = (img[ch, y0, x0] * (1 - fy) * (1 - fx)
                                 + img[ch, y0, x1] * (1 - fy) * fx
                                 + img[ch, y1, x0] * fy * (1 - fx)
                                 + img[ch, y1, x1] * fy * fx)
    return out


# Frozen output of direct_bicubic on an 8x8 0/255 checkerboard, target 5x5
# (identical for all three channels).
GOLDEN_CHECKERBOARD_5x5 = np.array([
    [104.9017725, 76.82844, 127.5, 178.17156, 150.0982275],
    [76.82844, 13.88016, 127.5, 241.11984, 178.17156],
    [127.5, 127.5, 127.5, 127.5, 127.5],
    [178.17156, 241.11984, 127.5, 13.88016, 76.82844],
    [150.0982275, 178.17156, 127.5, 76.82844, 104.9017725],
])


def checkerboard(n=8):
    board = np.fromfunction(lambda i, j: ((i + j) % 2) * 255.0, (n, n))
    return np.stack([board, board, board])


# --- grayworld ----------------------------------------------------------------


def test_grayworld_constant_gray_image_unchanged():
    x = np.full((3, 6, 6), 42.0)
    assert np.allclose(grayworld(x), x, rtol=1e-12)


def test_grayworld_hand_built_gains():
    # channel means (2, 4, 6) -> mean_all 4 -> gains (2, 1, 2/3)
    x = np.empty((3, 2, 2))
    x[0], x[1], x[2] = 2.0, 4.0, 6.0
    out = grayworld(x)
    assert np.allclose(out[0], 4.0) and np.allclose(out[1], 4.0) and np.allclose(out[2], 4.0)
    # the pixel (2, 4, 6) maps to (4, 4, 4)
    assert np.allclose(out[:, 0, 0], [4.0, 4.0, 4.0])


def test_grayworld_equalizes_channel_means():
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = rng.uniform(1.0, 255.0, size=(3, 17, 23))
        out = grayworld(x)
        means = out.mean(axis=(1, 2))
        assert np.allclose(means, means.mean(), rtol=1e-6)


def test_grayworld_scale_equivariance():
    rng = np.random.default_rng(6)
    x = rng.uniform(1.0, 255.0, size=(3, 9, 9))
    for k in (0.25, 3.0, 117.0):
        assert np.allclose(grayworld(k * x), k * grayworld(x), rtol=1e-6)


def test_grayworld_idempotence():
    rng = np.random.default_rng(7)
    x = rng.uniform(1.0, 255.0, size=(3, 9, 9))
    once = grayworld(x)
    assert np.allclose(grayworld(once), once, rtol=1e-6)


def test_grayworld_zero_mean_channel_rejected():
    x = np.ones((3, 4, 4))
    x[1] = 0.0
    with pytest.raises(DegenerateInputError):
        grayworld(x)


# --- mean subtraction ----------------------------------------------------------


def test_subtract_mean_of_itself_is_zero():
    mean = (124.0, 117.0, 104.0)
    x = np.empty((3, 4, 4))
    x[0], x[1], x[2] = mean
    assert np.all(subtract_mean(x, mean) == 0.0)


def test_subtract_mean_of_zero_image():
    mean = (124.0, 117.0, 104.0)
    out = subtract_mean(np.zeros((3, 2, 2)), mean)
    for c in range(3):
        assert np.all(out[c] == -mean[c])


def test_subtract_mean_elementwise():
    x = np.empty((3, 1, 1))
    x[:, 0, 0] = (130.0, 120.0, 110.0)
    out = subtract_mean(x, (124.0, 117.0, 104.0))
    assert np.allclose(out[:, 0, 0], [6.0, 3.0, 6.0])


# --- bicubic resize -------------------------------------------------------------


def test_resize_identity_when_target_matches():
    rng = np.random.default_rng(8)
    x = rng.uniform(0, 255, size=(3, 12, 12))
    assert np.allclose(resize_bicubic(x, 12), x, atol=1e-6)


def test_resize_distorts_aspect_ratio_to_square():
    # full-scale shape: 1022x767 input squeezed to 224x224
    rng = np.random.default_rng(9)
    x = rng.uniform(0, 255, size=(3, 767, 1022))
    out = resize_bicubic(x, 224)
    assert out.shape == (3, 224, 224)


def test_resize_matches_frozen_bicubic_golden():
    out = resize_bicubic(checkerboard(8), 5)
    for c in range(3):
        assert np.allclose(out[c], GOLDEN_CHECKERBOARD_5x5, atol=1e-9)


def test_bilinear_differs_from_bicubic_on_checkerboard():
    bil = direct_bilinear(checkerboard(8), 5, 5)
    assert np.abs(bil - GOLDEN_CHECKERBOARD_5x5).max() > 1.0


def test_separable_matches_direct_oracle_on_random_inputs():
    rng = np.random.default_rng(10)
    for h, w, t in ((9, 7, 5), (6, 11, 8), (5, 5, 9)):
        x = rng.uniform(0, 255, size=(3, h, w))
        assert np.allclose(resize_bicubic(x, t), direct_bicubic(x, t, t), atol=1e-9)


def test_resize_rejects_tiny_inputs():
    with pytest.raises(ValueError, match="at least 4x4"):
        resize_bicubic(np.zeros((3, 3, 10)), 5)


def test_unsupported_resolution_is_a_config_error():
    with pytest.raises(ConfigError, match="supported set"):
        PreprocessConfig(target_resolution=100)


# --- pipeline -------------------------------------------------------------------


def test_pipeline_zeroes_out_image_equal_to_mean(tmp_path):
    mean = IMAGENET_MEAN_RGB
    pixels = np.zeros((10, 10, 3), dtype=np.uint8)
    pixels[..., 0], pixels[..., 1], pixels[..., 2] = 124, 116, 104
    write_png(tmp_path / "c.png", pixels)
    manifest = load_manifest(make_manifest_csv(tmp_path / "m.csv", ["c,c.png,MM,train"]))
    config = PreprocessConfig(target_resolution=64, mean_rgb=(124.0, 116.0, 104.0))
    tensor = preprocess_pipeline(manifest.records[0], config)
    assert tensor.data.shape == (3, 64, 64)
    # constant image: grayworld gains rebalance it to the mean of means
    expected = (124 + 116 + 104) / 3 - np.array([124.0, 116.0, 104.0])
    for c in range(3):
        assert np.allclose(tensor.data[c], expected[c], atol=1e-4)


def test_pipeline_composition_oracle():
    rng = np.random.default_rng(12)
    x = rng.uniform(1.0, 255.0, size=(3, 15, 11))
    config = PreprocessConfig(target_resolution=64)
    got = preprocess_array(x, config)
    expected = resize_bicubic(subtract_mean(grayworld(x), config.mean_rgb), 64)
    assert np.allclose(got, expected.astype(np.float32), atol=1e-6)
    assert got.dtype == np.float32


def test_pipeline_order_sensitivity_witness():
    # Swapping mean subtraction before grayworld changes the result: the
    # grayworld gains depend on which channel means they see.
    rng = np.random.default_rng(13)
    x = rng.uniform(50.0, 255.0, size=(3, 8, 8))
    x[0] *= 0.5  # make it clearly non-gray
    mean = IMAGENET_MEAN_RGB
    paper_order = subtract_mean(grayworld(x), mean)
    swapped = grayworld(np.clip(subtract_mean(x, mean), 1e-3, None))
    assert np.abs(paper_order - swapped).max() > 1.0
    config = PreprocessConfig(target_resolution=64)
    got = preprocess_array(x, config)
    expected = resize_bicubic(paper_order, 64).astype(np.float32)
    assert np.allclose(got, expected, atol=1e-6)


def test_pipeline_mean_after_resize_flag():
    rng = np.random.default_rng(14)
    x = rng.uniform(1.0, 255.0, size=(3, 10, 12))
    config = PreprocessConfig(target_resolution=64, mean_after_resize=True)
    got = preprocess_array(x, config)
    expected = subtract_mean(resize_bicubic(grayworld(x), 64), config.mean_rgb)
    assert np.allclose(got, expected.astype(np.float32), atol=1e-6)


def test_pipeline_error_carries_image_id(tmp_path):
    manifest = load_manifest(make_manifest_csv(tmp_path / "m.csv",
                                               ["ghost,missing.png,MM,train"]))
    with pytest.raises(PreprocessError, match="ghost"):
        preprocess_pipeline(manifest.records[0], PreprocessConfig(target_resolution=64))


def test_preprocessed_tensor_validates_shape():
    with pytest.raises(ValueError, match="3, R, R"):
        PreprocessedTensor(data=np.zeros((3, 4, 5), dtype=np.float32), origin_id="x")


# --- cache -----------------------------------------------------------------------


def test_materialize_cache_counts_and_idempotence(tiny_dataset, tmp_path):
    config = PreprocessConfig(target_resolution=64)
    result = materialize_cache(tiny_dataset, config, tmp_path / "cache")
    assert (result.written, result.skipped) == (6, 0)
    files = sorted(p.name for p in (tmp_path / "cache" / "64").iterdir())
    assert len([f for f in files if f.endswith(".f32")]) == 6
    assert len([f for f in files if f.endswith(".json")]) == 6

    again = materialize_cache(tiny_dataset, config, tmp_path / "cache")
    assert (again.written, again.skipped) == (0, 6)


def test_materialize_cache_across_all_resolutions(tiny_dataset, tmp_path):
    # 6 images x 5 resolutions -> 30 tensor files
    total = 0
    for res in (64, 128, 224, 448, 768):
        result = materialize_cache(tiny_dataset, PreprocessConfig(target_resolution=res),
                                   tmp_path / "cache")
        total += result.written
    assert total == 30


def test_cache_tensors_are_bit_identical_across_runs(tiny_dataset, tmp_path):
    config = PreprocessConfig(target_resolution=64)
    materialize_cache(tiny_dataset, config, tmp_path / "c1")
    materialize_cache(tiny_dataset, config, tmp_path / "c2")
    for rec in tiny_dataset.records:
        a = (tmp_path / "c1" / "64" / f"{rec.image_id}.f32").read_bytes()
        b = (tmp_path / "c2" / "64" / f"{rec.image_id}.f32").read_bytes()
        assert a == b


def test_cache_invalidated_by_config_change(tiny_dataset, tmp_path):
    materialize_cache(tiny_dataset, PreprocessConfig(target_resolution=64),
                      tmp_path / "cache")
    changed = PreprocessConfig(target_resolution=64, mean_rgb=(100.0, 100.0, 100.0))
    result = materialize_cache(tiny_dataset, changed, tmp_path / "cache")
    assert result.written == 6


def test_cache_read_round_trip(tiny_dataset, tmp_path):
    config = PreprocessConfig(target_resolution=64)
    materialize_cache(tiny_dataset, config, tmp_path / "cache")
    cache = TensorCache(tmp_path / "cache", 64)
    rec = tiny_dataset.records[0]
    stored = cache.read(rec.image_id)
    direct = preprocess_pipeline(rec, config).data
    assert np.array_equal(stored, direct)
    meta = json.loads(cache.sidecar_path(rec.image_id).read_text())
    assert meta["shape"] == [3, 64, 64]
    assert meta["config_hash"] == config.config_hash()


def test_cache_missing_ids(tiny_dataset, tmp_path):
    config = PreprocessConfig(target_resolution=64)
    materialize_cache(tiny_dataset, config, tmp_path / "cache")
    cache = TensorCache(tmp_path / "cache", 64)
    ids = [r.image_id for r in tiny_dataset.records]
    assert cache.missing_ids(ids, config.config_hash()) == []
    assert cache.missing_ids(ids + ["ghost"]) == ["ghost"]
