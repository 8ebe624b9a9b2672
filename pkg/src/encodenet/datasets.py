"""Image datasets: IDX / CIFAR binary loaders, subsampling, batching.

All images are float32 NCHW scaled by 1/255 into [0, 1]; no mean/std
standardization is applied.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803
CIFAR_IMAGE_BYTES = 3 * 32 * 32
CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")


@dataclass(frozen=True)
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_names: tuple | None = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DatasetError(f"images must be N x C x H x W, got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise DatasetError(f"{labels.shape[0] if labels.ndim else 0} labels for {images.shape[0]} images")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise DatasetError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def take(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(self.images[indices], self.labels[indices], self.num_classes, self.class_names)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class DataSplit:
    train: LabeledImageSet
    test: LabeledImageSet
    seed: int | None = None


def _read_bytes(path):
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(raw, expected_magic, what):
    if len(raw) < 8:
        raise DatasetError(f"{what}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetError(f"{what}: IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{what}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DatasetError(f"{what}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes=None, class_names=None):
    """Grayscale images and labels in the IDX container (uint8 only)."""
    pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGE_MAGIC, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABEL_MAGIC, "labels")
    if len(labels) != len(pixels):
        raise DatasetError(f"count mismatch: {len(pixels)} images but {len(labels)} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 0
    images = pixels[:, None, :, :].astype(np.float32) / 255.0
    return LabeledImageSet(images, labels.astype(np.int64), num_classes, class_names)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images (N x H x W, or N x 1 x H x W floats in [0,1]) and labels."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    if images.ndim == 4:
        if images.shape[1] != 1:
            raise DatasetError("IDX export supports single-channel images only")
        images = images[:, 0]
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(np.ascontiguousarray(images).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_cifar_bin(paths, num_classes=10):
    """CIFAR binary batches. ``num_classes=100`` reads CIFAR-100 fine labels."""
    label_bytes = 1 if num_classes == 10 else 2
    record = label_bytes + CIFAR_IMAGE_BYTES
    chunks = []
    for path in [paths] if isinstance(paths, (str, Path)) else paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % record:
            raise DatasetError(f"{path}: size {len(raw)} is not a multiple of the {record}-byte record")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, record))
    if not chunks:
        raise DatasetError("no CIFAR batch files given")
    records = np.concatenate(chunks)
    labels = records[:, label_bytes - 1].astype(np.int64)
    if labels.max() >= num_classes:
        raise DatasetError(f"label byte {int(labels.max())} outside [0, {num_classes})")
    images = records[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    names = CIFAR10_CLASSES if num_classes == 10 else None
    return LabeledImageSet(images, labels, num_classes, names)


def load_cifar10_bin(paths):
    return load_cifar_bin(paths, num_classes=10)


def subsample(data, per_class, seed):
    """Exactly ``per_class`` images of each class, picked by a seeded shuffle."""
    counts = data.class_counts()
    if per_class > counts.min():
        raise DatasetError(f"per_class={per_class} exceeds smallest class population {int(counts.min())}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    chosen = []
    for c in range(data.num_classes):
        members = order[data.labels[order] == c]
        chosen.append(members[:per_class])
    picked = np.concatenate(chosen)
    return data.take(picked[rng.permutation(len(picked))])


def epoch_order(n, seed, epoch):
    """Deterministic permutation for (seed, epoch)."""
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def batch_iterator(data, batch_size, shuffle_seed=None, epoch=0):
    """Yield (images, labels) covering ``data`` once; last batch may be short.

    With ``shuffle_seed=None`` the original order is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    images, labels = (data.images, data.labels) if isinstance(data, LabeledImageSet) else data
    n = len(images)
    order = np.arange(n) if shuffle_seed is None else epoch_order(n, shuffle_seed, epoch)
    for lo in range(0, n, batch_size):
        idx = order[lo : lo + batch_size]
        yield images[idx], labels[idx]


# -- synthetic desk-scale data ------------------------------------------------------


def _segment_field(size, p0, p1, width):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d = p1 - p0
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(d @ d, 1e-9), 0, 1)
    dist2 = (yy - p0[0] - t * d[0]) ** 2 + (xx - p0[1] - t * d[1]) ** 2
    return np.exp(-dist2 / (2 * width**2))


def _glyph(rng, size, strokes=3, extent=8):
    lo = (size - extent) / 2
    img = np.zeros((size, size))
    points = rng.uniform(lo, lo + extent, size=(strokes + 1, 2))
    for a, b in zip(points[:-1], points[1:]):
        img = np.maximum(img, _segment_field(size, a, b, 0.7))
    return img


def synthetic_prototypes(num_classes=10, modes=3, size=16, seed=1234):
    """(num_classes, modes, size, size) stroke glyphs; every (class, mode) gets its own shape."""
    rng = np.random.default_rng(seed)
    return np.stack([np.stack([_glyph(rng, size) for _ in range(modes)]) for _ in range(num_classes)])


def make_synthetic(
    train_per_class=100,
    test_per_class=100,
    num_classes=10,
    modes=3,
    size=16,
    noise=0.15,
    max_shift=2,
    seed=0,
    prototype_seed=1234,
    return_modes=False,
):
    """Desk-scale dataset whose classes each contain ``modes`` sub-populations.

    Every class is the union of ``modes`` unrelated stroke glyphs, so a
    class splits into visually distinct sub-populations the way a natural
    image class does. A sample is its glyph at a random shift and
    contrast plus Gaussian pixel noise. Train and test come from disjoint
    RNG streams.
    """
    glyphs = synthetic_prototypes(num_classes, modes, size, prototype_seed)

    def draw(per_class, stream):
        rng = np.random.default_rng([int(seed), stream])
        n = per_class * num_classes
        labels = np.repeat(np.arange(num_classes), per_class)
        mode = rng.integers(0, modes, size=n)
        shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
        contrast = rng.uniform(0.5, 1.0, size=n)
        images = np.empty((n, 1, size, size), dtype=np.float32)
        for i in range(n):
            img = np.roll(glyphs[labels[i], mode[i]], tuple(shifts[i]), axis=(0, 1)) * contrast[i]
            img = img + rng.normal(0, noise, size=img.shape)
            images[i, 0] = np.clip(img, 0, 1)
        perm = rng.permutation(n)
        out = LabeledImageSet(images[perm], labels[perm], num_classes, tuple(f"class{c}" for c in range(num_classes)))
        return out, mode[perm]

    (train, train_modes), (test, test_modes) = draw(train_per_class, 0), draw(test_per_class, 1)
    split = DataSplit(train, test, seed)
    return (split, train_modes, test_modes) if return_modes else split
