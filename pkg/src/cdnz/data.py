"""Image I/O, Gaussian noise synthesis, patch sampling, toy datasets.

Images are (3, H, W) float32 arrays with values in [0, 1]. Values are only
clamped/quantized when writing files; noisy training inputs stay unclamped.
Noise sigmas are quoted on the 0..255 scale and divided by 255 internally.
"""

import math
from dataclasses import dataclass, field

import numpy as np

# RNG stream tags so independent consumers of one seed never collide.
_STREAM_NOISE = 1
_STREAM_PATCH = 2
_STREAM_FIXED_NOISE = 3
_STREAM_HOLDOUT = 4
_STREAM_TOY = 10


class ImageFormatError(ValueError):
    """Malformed image file; the message carries the byte offset."""


# ---------------------------------------------------------------------------
# PPM / PGM / PNG I/O


def _parse_netpbm_header(blob, path, magic):
    if blob[:2] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} magic at byte 0, got {blob[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise ImageFormatError(f"{path}: bad header token at byte {pos}")
        fields.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace after maxval at byte {pos}")
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    return width, height, pos


def read_ppm(path):
    """Read an 8-bit binary PPM (P6) into a (3, H, W) float32 array."""
    with open(path, "rb") as f:
        blob = f.read()
    width, height, pos = _parse_netpbm_header(blob, path, b"P6")
    need = width * height * 3
    if len(blob) - pos < need:
        raise ImageFormatError(
            f"{path}: payload truncated at byte {len(blob)} (need {pos + need} bytes)")
    raw = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    img = raw.reshape(height, width, 3).transpose(2, 0, 1)
    return (img.astype(np.float32) / 255.0)


def write_ppm(img, path):
    """Write a (3, H, W) array as P6, clamping to [0,1] and quantizing."""
    data = _quantize_u8(img)
    c, h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(data.transpose(1, 2, 0)).tobytes())


def read_pgm(path):
    """Read an 8-bit binary PGM (P5) into an (H, W) int64 array (label maps)."""
    with open(path, "rb") as f:
        blob = f.read()
    width, height, pos = _parse_netpbm_header(blob, path, b"P5")
    need = width * height
    if len(blob) - pos < need:
        raise ImageFormatError(
            f"{path}: payload truncated at byte {len(blob)} (need {pos + need} bytes)")
    raw = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return raw.reshape(height, width).astype(np.int64)


def write_pgm(mask, path):
    arr = np.asarray(mask)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("label map values must fit in a byte")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(arr.astype(np.uint8).tobytes())


def _quantize_u8(img):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) image, got {arr.shape}")
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def quantize8(img):
    """Clamp to [0,1] and round to the 8-bit grid (file-boundary semantics)."""
    return _quantize_u8(img).astype(np.float32) / 255.0


def read_image(path):
    """Read a P6 PPM or an 8-bit RGB PNG as (3, H, W) float32 in [0,1]."""
    path = str(path)
    with open(path, "rb") as f:
        head = f.read(8)
    if head[:2] == b"P6":
        return read_ppm(path)
    if head == b"\x89PNG\r\n\x1a\n":
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        return arr.transpose(2, 0, 1).astype(np.float32) / 255.0
    raise ImageFormatError(f"{path}: unrecognized magic {head[:2]!r} at byte 0")


def write_image(img, path):
    path = str(path)
    if path.endswith(".png"):
        from PIL import Image as PILImage

        PILImage.fromarray(_quantize_u8(img).transpose(1, 2, 0)).save(path)
    else:
        write_ppm(img, path)


# ---------------------------------------------------------------------------
# noise


@dataclass
class NoiseModel:
    """i.i.d. zero-mean Gaussian noise; sigma on the 0..255 scale."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def add_noise(img, model):
    """img + N(0, (sigma/255)^2), unclamped; deterministic given the seed."""
    img = np.asarray(img)
    if model.sigma == 0:
        return img.copy()
    rng = np.random.default_rng([model.seed, _STREAM_NOISE])
    noise = rng.normal(0.0, model.sigma / 255.0, img.shape)
    return img + noise.astype(img.dtype)


# ---------------------------------------------------------------------------
# patch sampling


@dataclass
class PatchStream:
    """Single-consumer stream of aligned (noisy, clean) patch batches.

    With ``fresh_noise`` every batch gets newly sampled noise; otherwise a
    fixed noisy copy of each source image is synthesized once and patches
    are cropped from it.
    """

    images: list
    sigma: float
    patch_size: int = 48
    batch_size: int = 32
    seed: int = 0
    fresh_noise: bool = True
    names: list = None
    _iteration: int = field(default=0, repr=False)
    _noisy_images: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        for i, img in enumerate(self.images):
            c, h, w = img.shape
            if h < self.patch_size or w < self.patch_size:
                name = self.names[i] if self.names else f"image #{i}"
                raise ValueError(
                    f"{name}: size {h}x{w} smaller than patch size {self.patch_size}")

    def _fixed_noisy(self):
        if self._noisy_images is None:
            out = []
            for i, img in enumerate(self.images):
                rng = np.random.default_rng([self.seed, _STREAM_FIXED_NOISE, i])
                out.append(img + rng.normal(0.0, self.sigma / 255.0, img.shape).astype(img.dtype))
            self._noisy_images = out
        return self._noisy_images

    def _draw(self, rng):
        p = self.batch_size
        ps = self.patch_size
        clean = np.empty((p, 3, ps, ps), dtype=np.float32)
        noisy = np.empty_like(clean)
        fixed = None if self.fresh_noise else self._fixed_noisy()
        for k in range(p):
            i = int(rng.integers(0, len(self.images)))
            img = self.images[i]
            y0 = int(rng.integers(0, img.shape[1] - ps + 1))
            x0 = int(rng.integers(0, img.shape[2] - ps + 1))
            clean[k] = img[:, y0:y0 + ps, x0:x0 + ps]
            if fixed is not None:
                noisy[k] = fixed[i][:, y0:y0 + ps, x0:x0 + ps]
        if self.fresh_noise:
            noisy = clean + rng.normal(0.0, self.sigma / 255.0, clean.shape).astype(np.float32)
        return noisy, clean

    def holdout_batch(self):
        """A fixed evaluation batch; never advances the stream."""
        rng = np.random.default_rng([self.seed, _STREAM_HOLDOUT])
        return self._draw(rng)


def sample_patches(stream):
    """Next (noisy, clean) batch of shape (B, 3, P, P); deterministic per seed."""
    rng = np.random.default_rng([stream.seed, _STREAM_PATCH, stream._iteration])
    stream._iteration += 1
    return stream._draw(rng)


# ---------------------------------------------------------------------------
# toy datasets


@dataclass
class LabeledDataset:
    images: np.ndarray       # (n, 3, h, w) float32
    labels: np.ndarray       # (n,) or (n, h, w) int64
    kind: str                # classification | segmentation
    num_classes: int

    def __len__(self):
        return self.images.shape[0]


@dataclass
class ToyDataset:
    kind: str
    num_classes: int
    seed: int
    train: LabeledDataset
    test: LabeledDataset


def _grid(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float32)
    return x, y


def _classification_image(rng, size, label):
    """Smooth (class 0) vs striped-texture (class 1) images."""
    x, y = _grid(size)
    base = rng.uniform(0.3, 0.7, (3, 1, 1)).astype(np.float32)
    gx, gy = rng.uniform(-1.0, 1.0, 2)
    ramp = (gx * x + gy * y) / size
    ramp -= ramp.mean()
    img = base + rng.uniform(0.05, 0.15) * ramp
    if label == 1:
        theta = rng.uniform(0.0, math.pi)
        period = rng.uniform(2.5, 5.0)
        phase = rng.uniform(0.0, 2 * math.pi)
        stripes = np.sin(2 * math.pi * (math.cos(theta) * x + math.sin(theta) * y) / period + phase)
        img = img + rng.uniform(0.18, 0.25) * stripes
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _segmentation_image(rng, size):
    """Smooth background (0) + one circle (1) + one rectangle (2)."""
    x, y = _grid(size)
    img = np.empty((3, size, size), dtype=np.float32)
    bg = np.array([rng.uniform(0.2, 0.45), rng.uniform(0.45, 0.7), rng.uniform(0.2, 0.45)],
                  dtype=np.float32)
    img[:] = bg[:, None, None]
    gx, gy = rng.uniform(-1.0, 1.0, 2)
    img += (rng.uniform(0.03, 0.1) * ((gx * x + gy * y) / size - 0.5)).astype(np.float32)
    mask = np.zeros((size, size), dtype=np.int64)

    rw, rh = int(rng.integers(8, size // 2 + 1)), int(rng.integers(8, size // 2 + 1))
    rx = int(rng.integers(0, size - rw + 1))
    ry = int(rng.integers(0, size - rh + 1))
    rect_color = np.array([rng.uniform(0.05, 0.25), rng.uniform(0.05, 0.25),
                           rng.uniform(0.65, 0.95)], dtype=np.float32)
    img[:, ry:ry + rh, rx:rx + rw] = rect_color[:, None, None]
    mask[ry:ry + rh, rx:rx + rw] = 2

    r = rng.uniform(size / 8, size / 4)
    cx = rng.uniform(r, size - r)
    cy = rng.uniform(r, size - r)
    inside = (x - cx) ** 2 + (y - cy) ** 2 <= r * r
    circ_color = np.array([rng.uniform(0.65, 0.95), rng.uniform(0.05, 0.25),
                           rng.uniform(0.05, 0.25)], dtype=np.float32)
    img[:, inside] = circ_color[:, None]
    mask[inside] = 1

    img += rng.normal(0.0, 0.01, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def generate_toy(kind, count, seed, image_size=32, test_fraction=0.25):
    """Deterministic synthetic dataset with a fixed train/test split.

    Classification: two balanced classes (smooth vs striped texture).
    Segmentation: three classes (background / circle / rectangle).
    """
    if kind not in ("classification", "segmentation"):
        raise ValueError(f"kind must be classification or segmentation, got {kind!r}")
    k = 2 if kind == "classification" else 3
    if count < 2 * k:
        raise ValueError(f"count must be >= {2 * k}")
    images = np.empty((count, 3, image_size, image_size), dtype=np.float32)
    if kind == "classification":
        labels = np.empty(count, dtype=np.int64)
        for i in range(count):
            rng = np.random.default_rng([seed, _STREAM_TOY, i])
            labels[i] = i % 2  # alternation keeps both splits balanced
            images[i] = _classification_image(rng, image_size, labels[i])
    else:
        labels = np.empty((count, image_size, image_size), dtype=np.int64)
        for i in range(count):
            rng = np.random.default_rng([seed, _STREAM_TOY, i])
            images[i], labels[i] = _segmentation_image(rng, image_size)
    n_test = max(1, int(round(count * test_fraction)))
    n_train = count - n_test
    train = LabeledDataset(images[:n_train], labels[:n_train], kind, k)
    test = LabeledDataset(images[n_train:], labels[n_train:], kind, k)
    return ToyDataset(kind, k, seed, train, test)


def generate_image_corpus(count, seed, image_size=64):
    """Unlabeled toy images for denoiser training: a mix of smooth, striped
    and shape-bearing content."""
    images = []
    for i in range(count):
        rng = np.random.default_rng([seed, _STREAM_TOY, 100 + i])
        if i % 2 == 0:
            img = _classification_image(rng, image_size, (i // 2) % 2)
        else:
            img, _ = _segmentation_image(rng, image_size)
        images.append(img)
    return images


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, entries):
    """One `<relative-path>\\t<label-or-maskpath>` line per entry."""
    with open(path, "w") as f:
        f.write("# <relative-path>\t<label-or-maskpath>\n")
        for rel, label in entries:
            f.write(f"{rel}\t{label}\n")


def read_manifest(path):
    """Entries as (path, label) with paths resolved next to the manifest."""
    import os

    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected <path>\\t<label>")
            rel, label = line.split("\t", 1)
            entries.append((os.path.join(base, rel), label))
    return entries
