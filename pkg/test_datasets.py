"""
Tests for IDX ingestion and the synthetic task
"""
import gzip
import struct

import numpy as np
import pytest
import torch

from datasets import (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, MNIST_FILES, SequenceDataset, ingest_mnist,
                      load_dataset, load_idx_pair, normalization_stats, read_idx, synthetic_dataset)
from exceptions import DataFormatError
from net import TrainConfig


def idx_bytes(array: np.ndarray, magic: int) -> bytes:
    return struct.pack('>I', magic) + struct.pack(f'>{array.ndim}I', *array.shape) + array.astype(np.uint8).tobytes()


def write_idx(path, array, magic, compress=False):
    data = idx_bytes(array, magic)
    if compress:
        path = path.with_name(path.name + '.gz')
        with gzip.open(path, 'wb') as f:
            f.write(data)
    else:
        path.write_bytes(data)
    return path


@pytest.fixture
def mnist_dir(tmp_path):
    rng = np.random.default_rng(0)
    train_images = rng.integers(0, 256, (6, 2, 2))
    test_images = rng.integers(0, 256, (4, 2, 2))
    write_idx(tmp_path / MNIST_FILES['train_images'], train_images, IDX_IMAGES_MAGIC)
    write_idx(tmp_path / MNIST_FILES['train_labels'], np.arange(6) % 10, IDX_LABELS_MAGIC)
    write_idx(tmp_path / MNIST_FILES['test_images'], test_images, IDX_IMAGES_MAGIC, compress=True)
    write_idx(tmp_path / MNIST_FILES['test_labels'], np.array([3, 1, 4, 1]), IDX_LABELS_MAGIC, compress=True)
    return tmp_path, train_images, test_images


class TestReadIdx:
    def test_header_and_values(self, tmp_path):
        images = np.arange(24).reshape(2, 3, 4)
        path = write_idx(tmp_path / 'img', images, IDX_IMAGES_MAGIC)
        out = read_idx(path, IDX_IMAGES_MAGIC)
        assert out.dtype == np.uint8
        np.testing.assert_array_equal(out, images)

    def test_gzip(self, tmp_path):
        labels = np.array([7, 2, 1])
        path = write_idx(tmp_path / 'lbl', labels, IDX_LABELS_MAGIC, compress=True)
        np.testing.assert_array_equal(read_idx(path), labels)

    def test_wrong_magic(self, tmp_path):
        path = write_idx(tmp_path / 'lbl', np.array([1, 2]), IDX_LABELS_MAGIC)
        with pytest.raises(DataFormatError, match='magic'):
            read_idx(path, IDX_IMAGES_MAGIC)

    def test_truncated_data(self, tmp_path):
        path = tmp_path / 'img'
        path.write_bytes(idx_bytes(np.zeros((2, 2, 2)), IDX_IMAGES_MAGIC)[:-1])
        with pytest.raises(DataFormatError, match='expected 8 bytes'):
            read_idx(path)

    def test_short_file(self, tmp_path):
        path = tmp_path / 'tiny'
        path.write_bytes(b'\x00\x00')
        with pytest.raises(DataFormatError):
            read_idx(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError, match='not found'):
            read_idx(tmp_path / 'nope')

    def test_count_mismatch(self, tmp_path):
        images = write_idx(tmp_path / 'img', np.zeros((3, 2, 2)), IDX_IMAGES_MAGIC)
        labels = write_idx(tmp_path / 'lbl', np.zeros(2), IDX_LABELS_MAGIC)
        with pytest.raises(DataFormatError, match='3 images but 2 labels'):
            load_idx_pair(images, labels)


class TestMnist:
    def test_ingest(self, mnist_dir):
        data_dir, train_images, test_images = mnist_dir
        train, test = ingest_mnist(data_dir)
        assert (len(train), train.seq_len, len(test)) == (6, 4, 4)
        raw = train_images.reshape(6, -1).astype(float)
        mean, std = raw.mean(), raw.std()
        np.testing.assert_allclose(train.inputs, (raw - mean) / std)
        np.testing.assert_allclose(test.inputs, (test_images.reshape(4, -1) - mean) / std)
        np.testing.assert_array_equal(test.labels, [3, 1, 4, 1])
        assert train.num_classes == 10

    def test_subsets_are_deterministic(self, mnist_dir):
        data_dir = mnist_dir[0]
        a, _ = ingest_mnist(data_dir, train_size=3, eval_size=2, seed=5)
        b, _ = ingest_mnist(data_dir, train_size=3, eval_size=2, seed=5)
        assert len(a) == 3
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataFormatError):
            ingest_mnist(tmp_path)

    def test_load_dataset_mnist(self, mnist_dir):
        cfg = TrainConfig(dataset='mnist', train_size=4, eval_size=2)
        train, test = load_dataset(cfg, mnist_dir[0])
        assert (len(train), len(test)) == (4, 2)


class TestSynthetic:
    def test_shapes_and_labels(self):
        data = synthetic_dataset(40, length=64, num_classes=5, seed=1)
        assert data.inputs.shape == (40, 64)
        assert set(np.unique(data.labels)) <= set(range(5))
        assert abs(data.inputs.mean()) < 1e-12
        assert data.inputs.std() == pytest.approx(1.0)

    def test_deterministic(self):
        a, b = synthetic_dataset(10, seed=3), synthetic_dataset(10, seed=3)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        assert not np.array_equal(a.inputs, synthetic_dataset(10, seed=4).inputs)

    def test_load_dataset_split(self):
        cfg = TrainConfig(train_size=30, eval_size=10, seq_len=32, num_classes=3)
        train, test = load_dataset(cfg, data_dir=None)
        assert (len(train), len(test), train.seq_len) == (30, 10, 32)


class TestSequenceDataset:
    def test_tensors(self):
        data = SequenceDataset(np.ones((3, 5)), [0, 1, 2], 3)
        x, y = data.tensors(np.array([2, 0]))
        assert x.dtype == torch.float64 and y.dtype == torch.int64
        assert y.tolist() == [2, 0]

    def test_validation(self):
        with pytest.raises(DataFormatError):
            SequenceDataset(np.ones(5), [0], 2)
        with pytest.raises(DataFormatError):
            SequenceDataset(np.ones((3, 5)), [0, 1], 2)

    def test_normalization_of_constant_input(self):
        assert normalization_stats(np.full((2, 2), 3.0)) == (3.0, 1.0)
