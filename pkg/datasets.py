"""
Dataset ingestion: MNIST IDX files and the built-in synthetic task

Sequential MNIST flattens each 28x28 image into a length-784 scalar
sequence. The synthetic task needs no downloads: the class is encoded by the
frequency of a burst that appears early in the sequence and must be
remembered until the end.
"""
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from exceptions import DataFormatError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    'train_images': 'train-images-idx3-ubyte',
    'train_labels': 'train-labels-idx1-ubyte',
    'test_images': 't10k-images-idx3-ubyte',
    'test_labels': 't10k-labels-idx1-ubyte',
}


@dataclass(eq=False)
class SequenceDataset:
    """Scalar sequences (N, L) with integer labels (N,)"""
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = 'dataset'

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise DataFormatError(f"inputs must be (N, L), got shape {self.inputs.shape}")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataFormatError(
                f"{self.inputs.shape[0]} sequences but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def seq_len(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices: np.ndarray) -> 'SequenceDataset':
        return SequenceDataset(self.inputs[indices], self.labels[indices], self.num_classes, self.name)

    def tensors(self, indices: Optional[np.ndarray] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Torch (float64 inputs, int64 labels), optionally for a subset of rows."""
        x = self.inputs if indices is None else self.inputs[indices]
        y = self.labels if indices is None else self.labels[indices]
        return torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(np.ascontiguousarray(y))


def _open(path: Path):
    return gzip.open(path, 'rb') if path.suffix == '.gz' else open(path, 'rb')


def read_idx(path: Path, expected_magic: Optional[int] = None) -> np.ndarray:
    """
    Read an IDX file (optionally gzip-compressed) of unsigned bytes

    Args:
        path: File path
        expected_magic: Required magic number (0x803 images, 0x801 labels)

    Returns:
        uint8 array with the dimensions from the header
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"IDX file not found: {path}")
    with _open(path) as f:
        data = f.read()
    if len(data) < 4:
        raise DataFormatError(f"{path} is too short for an IDX header")
    magic = struct.unpack('>I', data[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise DataFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise DataFormatError(f"{path}: unsupported IDX type in magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f'>{ndim}I', data[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(data) - header < count:
        raise DataFormatError(f"{path}: expected {count} bytes of data, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx_pair(images_path: Path, labels_path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """Images flattened to (N, rows * cols) and labels (N,)."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels ({images_path}, {labels_path})"
        )
    return images.reshape(images.shape[0], -1), labels


def _find(data_dir: Path, stem: str) -> Path:
    for candidate in (data_dir / stem, data_dir / f'{stem}.gz'):
        if candidate.exists():
            return candidate
    raise DataFormatError(f"MNIST file {stem}[.gz] not found in {data_dir}")


def _pick(count: int, size: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if size is None or size >= count:
        return np.arange(count)
    return np.sort(rng.permutation(count)[:size])


def ingest_mnist(
    data_dir: Path,
    train_size: Optional[int] = None,
    eval_size: Optional[int] = None,
    seed: int = 0,
) -> Tuple[SequenceDataset, SequenceDataset]:
    """
    Load sequential MNIST from IDX files

    Sequences are normalized to zero mean and unit variance using statistics
    of the (selected) training split. Subsets are drawn deterministically
    from the seed.

    Args:
        data_dir: Directory holding the four standard IDX files
        train_size: Optional training subset size
        eval_size: Optional test subset size
        seed: Subset selection seed

    Returns:
        Tuple (train, eval) datasets
    """
    data_dir = Path(data_dir)
    logger.info(f"Loading MNIST from {data_dir}")
    train_x, train_y = load_idx_pair(_find(data_dir, MNIST_FILES['train_images']),
                                     _find(data_dir, MNIST_FILES['train_labels']))
    test_x, test_y = load_idx_pair(_find(data_dir, MNIST_FILES['test_images']),
                                   _find(data_dir, MNIST_FILES['test_labels']))
    rng = np.random.default_rng(seed)
    train_idx = _pick(train_x.shape[0], train_size, rng)
    test_idx = _pick(test_x.shape[0], eval_size, rng)
    train_x = train_x[train_idx].astype(np.float64)
    test_x = test_x[test_idx].astype(np.float64)

    mean, std = normalization_stats(train_x)
    logger.info(f"✓ MNIST: {train_x.shape[0]} train / {test_x.shape[0]} eval sequences of length {train_x.shape[1]}")
    return (SequenceDataset((train_x - mean) / std, train_y[train_idx], 10, 'smnist-train'),
            SequenceDataset((test_x - mean) / std, test_y[test_idx], 10, 'smnist-eval'))


def normalization_stats(x: np.ndarray) -> Tuple[float, float]:
    mean = float(np.mean(x))
    std = float(np.std(x))
    return mean, (std if std > 0 else 1.0)


def synthetic_dataset(
    num_samples: int,
    length: int = 128,
    num_classes: int = 4,
    seed: int = 0,
    noise: float = 0.3,
) -> SequenceDataset:
    """
    Delayed-copy + class-by-frequency task

    A sinusoidal burst with a class-specific frequency occupies the first
    quarter of the sequence; the rest is noise. The label can only be read
    off by a model that carries the burst through time.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, num_samples)
    burst = max(4, length // 4)
    t = np.arange(burst)
    freqs = 0.05 + 0.4 * (np.arange(num_classes) + 0.5) / num_classes
    phases = rng.uniform(0.0, 2.0 * np.pi, num_samples)
    x = noise * rng.standard_normal((num_samples, length))
    x[:, :burst] += np.sin(2.0 * np.pi * freqs[labels][:, None] * t[None, :] + phases[:, None])
    mean, std = normalization_stats(x)
    return SequenceDataset((x - mean) / std, labels, num_classes, 'synthetic')


def load_dataset(cfg, data_dir: Path) -> Tuple[SequenceDataset, SequenceDataset]:
    """Train/eval splits described by a TrainConfig."""
    if cfg.dataset == 'mnist':
        return ingest_mnist(data_dir, cfg.train_size, cfg.eval_size, cfg.seed)
    train_size = cfg.train_size or 2000
    eval_size = cfg.eval_size or 500
    full = synthetic_dataset(train_size + eval_size, cfg.seq_len, cfg.num_classes, cfg.seed)
    return (full.subset(np.arange(train_size)),
            full.subset(np.arange(train_size, train_size + eval_size)))
