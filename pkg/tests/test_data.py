"""Image I/O, noise statistics, patch sampling, toy generators, manifests."""

import numpy as np
import pytest

from cdnz import data
from cdnz.data import (ImageFormatError, NoiseModel, PatchStream, add_noise,
                       generate_image_corpus, generate_toy, quantize8,
                       read_image, read_manifest, read_pgm, read_ppm,
                       sample_patches, write_image, write_manifest, write_pgm,
                       write_ppm)


# ---------------------------------------------------------------------------
# PPM / PGM / PNG


def test_ppm_known_fixture_bytes(tmp_path):
    # 2x2 P6: pixels (0,0,0), (255,0,0), (0,255,0), (128,128,255)
    blob = b"P6\n2 2\n255\n" + bytes([0, 0, 0, 255, 0, 0, 0, 255, 0, 128, 128, 255])
    p = tmp_path / "f.ppm"
    p.write_bytes(blob)
    img = read_ppm(p)
    assert img.shape == (3, 2, 2)
    assert img[:, 0, 0].tolist() == [0.0, 0.0, 0.0]
    assert img[0, 0, 1] == 1.0 and img[1, 0, 1] == 0.0
    assert img[1, 1, 0] == 1.0
    assert img[2, 1, 1] == 1.0 and abs(img[0, 1, 1] - 128 / 255) < 1e-7


def test_ppm_header_with_comment(tmp_path):
    blob = b"P6\n# a comment\n2 1\n255\n" + bytes(6)
    p = tmp_path / "c.ppm"
    p.write_bytes(blob)
    assert read_ppm(p).shape == (3, 1, 2)


def test_ppm_roundtrip_quantization_bound(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((3, 7, 9)).astype(np.float32)
    p = tmp_path / "r.ppm"
    write_ppm(img, p)
    back = read_ppm(p)
    assert np.abs(back - img).max() <= 0.5 / 255 * (1 + 1e-6)


def test_ppm_malformed_header_reports_offset(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes(12))
    with pytest.raises(ImageFormatError, match="byte 0"):
        read_ppm(p)
    p2 = tmp_path / "trunc.ppm"
    p2.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    with pytest.raises(ImageFormatError, match="truncated"):
        read_ppm(p2)
    p3 = tmp_path / "tok.ppm"
    p3.write_bytes(b"P6\nxx 2\n255\n")
    with pytest.raises(ImageFormatError, match="byte"):
        read_ppm(p3)


def test_pgm_roundtrip(tmp_path):
    mask = np.array([[0, 1], [2, 255]], dtype=np.int64)
    p = tmp_path / "m.pgm"
    write_pgm(mask, p)
    assert np.array_equal(read_pgm(p), mask)


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.random((3, 6, 5)).astype(np.float32)
    p = tmp_path / "i.png"
    write_image(img, str(p))
    back = read_image(str(p))
    assert back.shape == (3, 6, 5)
    assert np.abs(back - img).max() <= 0.5 / 255 * (1 + 1e-6)


def test_read_image_dispatches_ppm(tmp_path):
    img = np.zeros((3, 2, 2), dtype=np.float32)
    p = tmp_path / "x.ppm"
    write_image(img, str(p))
    assert read_image(str(p)).shape == (3, 2, 2)


def test_quantize8_clamps():
    img = np.array([[[-0.5, 0.5]], [[1.5, 0.0]], [[0.2501, 1.0]]])
    q = quantize8(img)
    assert q.min() >= 0.0 and q.max() <= 1.0
    assert q[0, 0, 0] == 0.0 and q[1, 0, 0] == 1.0


# ---------------------------------------------------------------------------
# noise


def test_add_noise_sigma_zero_exact():
    rng = np.random.default_rng(2)
    img = rng.random((3, 8, 8)).astype(np.float32)
    out = add_noise(img, NoiseModel(0.0, seed=3))
    assert np.array_equal(out, img)
    assert out is not img


def test_add_noise_deterministic():
    img = np.zeros((3, 16, 16), dtype=np.float32)
    m = NoiseModel(25.0, seed=9)
    assert np.array_equal(add_noise(img, m), add_noise(img, m))
    m2 = NoiseModel(25.0, seed=10)
    assert not np.array_equal(add_noise(img, m), add_noise(img, m2))


def test_noise_statistics():
    img = np.full((3, 256, 256), 0.5, dtype=np.float32)
    for sigma in (15.0, 25.0, 60.0):
        noise = add_noise(img, NoiseModel(sigma, seed=4)) - img
        n = noise.size
        assert n >= 100_000
        emp = noise.std()
        assert abs(emp - sigma / 255) <= 0.03 * sigma / 255
        assert abs(noise.mean()) <= 3 * (sigma / 255) / np.sqrt(n)


def test_noise_pixel_independence():
    img = np.zeros((3, 256, 256), dtype=np.float32)
    noise = (add_noise(img, NoiseModel(25.0, seed=5)) - img).reshape(-1)
    a = noise[:-1] - noise[:-1].mean()
    b = noise[1:] - noise[1:].mean()
    corr = float((a * b).mean() / (a.std() * b.std()))
    assert abs(corr) < 0.02


def test_noise_not_clamped():
    img = np.zeros((3, 64, 64), dtype=np.float32)
    noisy = add_noise(img, NoiseModel(60.0, seed=6))
    assert noisy.min() < 0  # unclamped values survive


# ---------------------------------------------------------------------------
# patches


def _toy_images(k=4, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((3, size, size)).astype(np.float32) for _ in range(k)]


def test_sample_patches_shapes_and_alignment():
    stream = PatchStream(_toy_images(), sigma=25.0, patch_size=16, batch_size=32, seed=1)
    noisy, clean = sample_patches(stream)
    assert noisy.shape == clean.shape == (32, 3, 16, 16)
    diff = noisy - clean
    assert abs(diff.std() - 25 / 255) < 0.1 * 25 / 255
    assert abs(diff.mean()) < 3 * (25 / 255) / np.sqrt(diff.size)


def test_sample_patches_deterministic_sequence():
    s1 = PatchStream(_toy_images(), sigma=10.0, patch_size=8, batch_size=4, seed=2)
    s2 = PatchStream(_toy_images(), sigma=10.0, patch_size=8, batch_size=4, seed=2)
    for _ in range(3):
        n1, c1 = sample_patches(s1)
        n2, c2 = sample_patches(s2)
        assert np.array_equal(n1, n2) and np.array_equal(c1, c2)


def test_patch_bounds_always_inside():
    images = _toy_images(3, size=20)
    stream = PatchStream(images, sigma=5.0, patch_size=17, batch_size=8, seed=3)
    for _ in range(100):
        _noisy, clean = sample_patches(stream)
        assert np.isfinite(clean).all()


def test_undersized_image_rejected_by_name():
    images = [np.zeros((3, 8, 8), dtype=np.float32)]
    with pytest.raises(ValueError, match="tiny.ppm"):
        PatchStream(images, sigma=1.0, patch_size=16, batch_size=2, seed=0,
                    names=["tiny.ppm"])


def test_fixed_noise_mode_reuses_field():
    images = _toy_images(2, size=24)
    stream = PatchStream(images, sigma=25.0, patch_size=24, batch_size=2, seed=4,
                         fresh_noise=False)
    n1, c1 = sample_patches(stream)
    n2, c2 = sample_patches(stream)
    # whole-image patches: identical noisy copy whenever the same image recurs
    for i in range(2):
        for j in range(2):
            if np.array_equal(c1[i], c2[j]):
                assert np.array_equal(n1[i], n2[j])


# ---------------------------------------------------------------------------
# toy datasets


def test_generate_toy_deterministic():
    a = generate_toy("classification", 40, seed=7)
    b = generate_toy("classification", 40, seed=7)
    assert np.array_equal(a.train.images, b.train.images)
    assert np.array_equal(a.test.labels, b.test.labels)
    c = generate_toy("classification", 40, seed=8)
    assert not np.array_equal(a.train.images, c.train.images)


def test_classification_balance():
    ds = generate_toy("classification", 100, seed=9)
    for split in (ds.train, ds.test):
        frac = split.labels.mean()
        assert abs(frac - 0.5) <= 0.05


def test_segmentation_classes_present():
    ds = generate_toy("segmentation", 50, seed=10)
    count = 0
    for i in range(len(ds.train)):
        present = set(np.unique(ds.train.labels[i]))
        if {0, 1, 2} <= present:
            count += 1
    assert count >= 0.8 * len(ds.train)
    assert ds.num_classes == 3


def test_toy_images_in_range():
    for kind in ("classification", "segmentation"):
        ds = generate_toy(kind, 12, seed=11)
        assert ds.train.images.min() >= 0.0 and ds.train.images.max() <= 1.0
        assert ds.train.images.dtype == np.float32


def test_generate_toy_count_validation():
    with pytest.raises(ValueError):
        generate_toy("classification", 3, seed=0)
    with pytest.raises(ValueError):
        generate_toy("detection", 20, seed=0)


def test_image_corpus_sizes():
    imgs = generate_image_corpus(6, seed=12, image_size=48)
    assert len(imgs) == 6
    for im in imgs:
        assert im.shape == (3, 48, 48)
        assert im.min() >= 0.0 and im.max() <= 1.0


# ---------------------------------------------------------------------------
# manifests


def test_manifest_roundtrip(tmp_path):
    entries = [("a.ppm", "0"), ("sub/b.ppm", "1")]
    path = tmp_path / "list.manifest"
    write_manifest(path, entries)
    back = read_manifest(path)
    assert back[0][0] == str(tmp_path / "a.ppm") and back[0][1] == "0"
    assert back[1][0] == str(tmp_path / "sub/b.ppm")


def test_manifest_comments_and_errors(tmp_path):
    path = tmp_path / "m.manifest"
    path.write_text("# header\n\nimg.ppm\t2\n")
    assert read_manifest(path) == [(str(tmp_path / "img.ppm"), "2")]
    bad = tmp_path / "bad.manifest"
    bad.write_text("no-tab-here\n")
    with pytest.raises(ValueError, match="expected"):
        read_manifest(bad)
