"""Dataset readers (IDX, CIFAR binary), synthetic blobs and augmentation."""

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32
DATA_ENV = "BRANCH_DISTILL_DATA"


@dataclass
class Dataset:
    """Images (N, C, H, W) with aligned integer labels.

    Byte-valued images are kept as uint8 with ``scale = 1/255`` and converted
    on access; float images use ``scale = 1``.
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""
    scale: float = 1.0
    _stats: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"{self.name}: images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"{self.name}: labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def float_images(self, index=None, dtype=np.float64):
        raw = self.images if index is None else self.images[index]
        out = raw.astype(dtype)
        if self.scale != 1.0:
            out *= self.scale
        return out

    @property
    def normalization(self):
        """Per-channel (mean, std) of this split, computed once."""
        if self._stats is None:
            x = self.float_images()
            mean = x.mean(axis=(0, 2, 3))
            std = x.std(axis=(0, 2, 3))
            self._stats = (mean, np.where(std > 0, std, 1.0))
        return self._stats

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.class_count, self.name, self.scale)

    def checksum(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# IDX
# --------------------------------------------------------------------------


def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw, path, expected_magic):
    if len(raw) < 4:
        raise DataError(f"{path}: truncated at byte 0, need a 4-byte magic number")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header, need {header} bytes, file has {len(raw)}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    need = int(np.prod(dims))
    have = len(raw) - header
    if have != need:
        raise DataError(f"{path}: payload at byte {header} holds {have} bytes, dimensions {dims} need {need}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, limit=None, classes=10, name="idx"):
    """Parse an IDX image/label file pair. Pixels are scaled to [0, 1] on access."""
    images = _parse_idx(_read_bytes(images_path), images_path, IDX_IMAGES_MAGIC)
    labels = _parse_idx(_read_bytes(labels_path), labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images[:, None, :, :].copy(), labels.astype(np.int64), classes, name=name, scale=1.0 / 255.0)


def save_idx(images, labels, images_path, labels_path):
    """Write uint8 images (N, H, W) or (N, 1, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim == 4:
        images = images[:, 0]
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# --------------------------------------------------------------------------
# CIFAR binary
# --------------------------------------------------------------------------


def load_cifar_binary(paths, coarse=False, variant="cifar10", limit=None):
    """Read CIFAR-10 (label + 3072 px) or CIFAR-100 (coarse + fine + 3072 px) records."""
    if variant not in ("cifar10", "cifar100"):
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    head = 1 if variant == "cifar10" else 2
    record = head + CIFAR_PIXELS
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % record:
            whole = len(raw) // record
            raise DataError(
                f"{path}: {len(raw)} bytes is not a whole number of {record}-byte records "
                f"(expected {whole * record} or {(whole + 1) * record})"
            )
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        lab = arr[:, 0] if (variant == "cifar10" or coarse) else arr[:, 1]
        labels.append(lab.astype(np.int64))
        images.append(arr[:, head:].reshape(-1, 3, 32, 32))
    images = np.concatenate(images) if images else np.zeros((0, 3, 32, 32), np.uint8)
    labels = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    classes = 10 if variant == "cifar10" else (20 if coarse else 100)
    return Dataset(images.copy(), labels, classes, name=variant, scale=1.0 / 255.0)


def save_cifar_binary(images, labels, path, coarse_labels=None):
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), CIFAR_PIXELS)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if coarse_labels is not None:
        cols.insert(0, np.asarray(coarse_labels, dtype=np.uint8)[:, None])
    with open(path, "wb") as fh:
        fh.write(np.concatenate(cols + [images], axis=1).tobytes())


# --------------------------------------------------------------------------
# synthetic
# --------------------------------------------------------------------------


def synth_blobs(classes, per_class, image_shape=(1, 8, 8), seed=0, sigma=0.1, name="synth"):
    """Class-conditional Gaussian images around fixed random mean patterns."""
    if classes < 2:
        raise ConfigError(f"synth_blobs needs at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.0, 1.0, size=(classes,) + tuple(image_shape))
    labels = np.repeat(np.arange(classes), per_class)
    rng.shuffle(labels)
    images = means[labels] + sigma * rng.standard_normal((len(labels),) + tuple(image_shape))
    return Dataset(images, labels, classes, name=name)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    crop_pad: int = 0
    hflip: bool = False
    mean: Optional[Tuple[float, ...]] = None
    std: Optional[Tuple[float, ...]] = None
    force_offset: Optional[Tuple[int, int]] = None
    force_flip: Optional[bool] = None

    @property
    def normalizes(self):
        return self.mean is not None


def augment(batch, policy, rng=None):
    """Zero-pad and random-crop, then horizontal flip, then per-channel normalize."""
    x = np.array(batch, copy=True)
    B, C, H, W = x.shape
    if policy.crop_pad:
        p = policy.crop_pad
        padded = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=x.dtype)
        padded[:, :, p : p + H, p : p + W] = x
        if policy.force_offset is not None:
            offs = np.tile(np.asarray(policy.force_offset, dtype=np.int64), (B, 1))
        else:
            offs = rng.integers(0, 2 * p + 1, size=(B, 2))
        for i in range(B):
            r, c = offs[i]
            x[i] = padded[i, :, r : r + H, c : c + W]
    if policy.hflip:
        if policy.force_flip is not None:
            flips = np.full(B, bool(policy.force_flip))
        else:
            flips = rng.random(B) < 0.5
        x[flips] = x[flips, :, :, ::-1]
    if policy.mean is not None:
        mean = np.asarray(policy.mean, dtype=x.dtype).reshape(1, -1, 1, 1)
        std = np.asarray(policy.std, dtype=x.dtype).reshape(1, -1, 1, 1)
        x = (x - mean) / std
    return x


def pipelines(train):
    """(train policy, eval policy) for a dataset; eval only normalizes."""
    mean, std = train.normalization
    norm = dict(mean=tuple(float(v) for v in mean), std=tuple(float(v) for v in std))
    geometric = train.name.startswith("cifar")
    train_policy = AugmentPolicy(crop_pad=4 if geometric else 0, hflip=geometric, **norm)
    return train_policy, AugmentPolicy(**norm)


# --------------------------------------------------------------------------
# dataset ids
# --------------------------------------------------------------------------


def data_root(explicit=None):
    return Path(explicit or os.environ.get(DATA_ENV) or "data")


def _find(root, stem_variants):
    for name in stem_variants:
        for suffix in ("", ".gz"):
            p = root / (name + suffix)
            if p.exists():
                return p
    raise DataError(f"none of {list(stem_variants)} found under {root}")


def _idx_pair(root, prefix):
    imgs = _find(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])
    labs = _find(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])
    return imgs, labs


def parse_dataset_id(dataset_id):
    """``name`` or ``name:N``; N caps the number of training samples."""
    name, _, limit = str(dataset_id).partition(":")
    if limit:
        try:
            n = int(limit)
        except ValueError:
            raise ConfigError(f"dataset {dataset_id!r}: sample cap must be an integer") from None
        if n < 1:
            raise ConfigError(f"dataset {dataset_id!r}: sample cap must be >= 1")
        return name, n
    return name, None


DATASETS = ("mnist", "fashion-mnist", "cifar10", "cifar100", "synth")


def load_dataset(dataset_id, root=None, classes=None):
    """Resolve a dataset id into (train, test) splits."""
    name, limit = parse_dataset_id(dataset_id)
    root = data_root(root)
    if name in ("mnist", "fashion-mnist"):
        base = root / name if (root / name).is_dir() else root
        tr = load_idx(*_idx_pair(base, "train"), limit=limit, name=name)
        te = load_idx(*_idx_pair(base, "t10k"), name=name)
    elif name == "cifar10":
        base = next((b for b in (root / "cifar-10-batches-bin", root / "cifar10", root) if b.is_dir()), root)
        train_files = [_find(base, [f"data_batch_{i}.bin"]) for i in range(1, 6)]
        tr = load_cifar_binary(train_files, limit=limit)
        te = load_cifar_binary([_find(base, ["test_batch.bin"])])
    elif name == "cifar100":
        base = next((b for b in (root / "cifar-100-binary", root / "cifar100", root) if b.is_dir()), root)
        tr = load_cifar_binary([_find(base, ["train.bin"])], variant="cifar100", limit=limit)
        te = load_cifar_binary([_find(base, ["test.bin"])], variant="cifar100")
    elif name == "synth":
        k = classes or 4
        total = limit or 128 * k
        per = -(-total // k)
        held = max(per // 4, 1)
        # one draw so both splits share the class mean patterns
        full = synth_blobs(k, per + held, seed=1234)
        tr = full.subset(total)
        te = Dataset(full.images[per * k :], full.labels[per * k :], k, name="synth")
    else:
        raise ConfigError(f"unknown dataset {name!r}; choose one of {DATASETS}")
    return tr, te


def iterate_batches(n, batch_size, rng=None):
    """Index batches over ``n`` samples; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
