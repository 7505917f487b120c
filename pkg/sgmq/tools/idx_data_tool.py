"""
IDX Data Tool

- Parses MNIST IDX files (plain or gzip-compressed)
- Re-serializes datasets to IDX bytes
- Deterministic shuffled batching keyed on (seed, epoch)
"""

import gzip
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np

from sgmq.errors import DataFormatError

logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("[IDX_DATA] %(asctime)s - %(levelname)s - %(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"
NUM_CLASSES = 10
VALIDATION_SIZE = 10000

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class Dataset:
    """
    images: [n, 1, rows, cols] in [0, 1]; labels: [n] in [0, 9].
    `pixel_mean` is subtracted at batching time, so `images` stays in [0, 1].
    """
    images: np.ndarray
    labels: np.ndarray
    split_tag: str = "train"
    pixel_mean: float = 0.0

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(
                f"{len(self.images)} images but {len(self.labels)} labels in split '{self.split_tag}'"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def inputs(self, index=slice(None)) -> np.ndarray:
        return self.images[index] - self.pixel_mean


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def _parse_images(raw: bytes, path) -> np.ndarray:
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated image header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} for an image file")
    expected = count * rows * cols
    payload = raw[16:]
    if len(payload) < expected:
        raise DataFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise DataFormatError(f"{path}: {len(payload) - expected} unexpected trailing bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)
    return pixels.astype(np.float64) / 255.0


def _parse_labels(raw: bytes, path) -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated label header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} for a label file")
    payload = raw[8:]
    if len(payload) < count:
        raise DataFormatError(f"{path}: truncated payload ({len(payload)} of {count} bytes)")
    if len(payload) > count:
        raise DataFormatError(f"{path}: {len(payload) - count} unexpected trailing bytes")
    labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    if count and labels.max() >= NUM_CLASSES:
        raise DataFormatError(f"{path}: label {int(labels.max())} outside [0, {NUM_CLASSES})")
    return labels


def load_idx(images_path, labels_path, split_tag: str = "train") -> Dataset:
    images = _parse_images(_read_bytes(images_path), images_path)
    labels = _parse_labels(_read_bytes(labels_path), labels_path)
    if len(images) != len(labels):
        raise DataFormatError(
            f"count mismatch: {len(images)} images in {images_path}, {len(labels)} labels in {labels_path}"
        )
    logger.info(f"Loaded {len(labels)} samples for split '{split_tag}' from {Path(images_path).name}")
    return Dataset(images=images, labels=labels, split_tag=split_tag)


def idx_bytes(dataset: Dataset) -> Tuple[bytes, bytes]:
    """Uncompressed IDX (images, labels) bytes of a dataset."""
    n, _, rows, cols = dataset.images.shape
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    image_bytes = struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + pixels.tobytes()
    label_bytes = struct.pack(">II", LABEL_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    return image_bytes, label_bytes


def dump_idx(dataset: Dataset, images_path, labels_path) -> None:
    image_bytes, label_bytes = idx_bytes(dataset)
    Path(images_path).write_bytes(image_bytes)
    Path(labels_path).write_bytes(label_bytes)


def find_mnist(data_dir, split: str) -> Tuple[Path, Path]:
    """Locate the standard MNIST file pair for `split`, gzipped or not."""
    data_dir = Path(data_dir)
    found = []
    for stem in MNIST_FILES[split]:
        candidates = [data_dir / stem, data_dir / f"{stem}.gz"]
        path = next((c for c in candidates if c.exists()), None)
        if path is None:
            raise FileNotFoundError(f"missing MNIST file {stem}[.gz] under {data_dir}")
        found.append(path)
    return found[0], found[1]


def load_mnist(data_dir, validation_split: bool = False, limit: Optional[int] = None) -> Tuple[Dataset, Dataset]:
    """
    (train, eval) datasets with the training-set pixel mean attached to
    both. With `validation_split`, the last 10,000 training samples become
    the eval split instead of the official test set. The mean is taken over
    the whole training split, so `limit` never shifts the inputs.
    """
    train = load_idx(*find_mnist(data_dir, "train"), split_tag="train")
    if validation_split:
        train, held_out = split_validation(train, VALIDATION_SIZE)
    else:
        held_out = load_idx(*find_mnist(data_dir, "test"), split_tag="test")
    train, held_out = normalize(train, held_out)
    if limit is not None:
        train, held_out = limit_samples(train, limit), limit_samples(held_out, limit)
    return train, held_out


def split_validation(dataset: Dataset, n_validation: int) -> Tuple[Dataset, Dataset]:
    if not 0 < n_validation < len(dataset):
        raise DataFormatError(f"cannot carve {n_validation} validation samples from {len(dataset)}")
    cut = len(dataset) - n_validation
    train = Dataset(dataset.images[:cut], dataset.labels[:cut], "train", dataset.pixel_mean)
    val = Dataset(dataset.images[cut:], dataset.labels[cut:], "validation", dataset.pixel_mean)
    return train, val


def limit_samples(dataset: Dataset, k: int) -> Dataset:
    if k < 1:
        raise DataFormatError(f"sample limit must be >= 1, got {k}")
    return replace(dataset, images=dataset.images[:k], labels=dataset.labels[:k])


def normalize(train: Dataset, *others: Dataset) -> Tuple[Dataset, ...]:
    """Attach the training-set pixel mean to every split."""
    if len(train) == 0:
        raise DataFormatError("cannot normalize with an empty training set")
    mean = float(train.images.mean())
    return tuple(replace(d, pixel_mean=mean) for d in (train, *others))


def with_pixel_mean(pixel_mean: Optional[float], *datasets: Dataset) -> Tuple[Dataset, ...]:
    """Re-attach a mean stored with a model; None keeps the loaded one."""
    if pixel_mean is None:
        return datasets
    return tuple(replace(d, pixel_mean=float(pixel_mean)) for d in datasets)


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """
    Permutation of range(n) fixed by (seed, epoch), cut into batches;
    the final partial batch is kept.
    """
    if n == 0:
        raise DataFormatError("cannot batch an empty dataset")
    if batch_size < 1:
        raise DataFormatError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    for idx in batch_indices(len(dataset), batch_size, seed, epoch):
        yield dataset.inputs(idx), dataset.labels[idx]
