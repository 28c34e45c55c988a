import gzip
import struct

import numpy as np
import pytest

from dataio.sources import (Dataset, IdxSource, Normalizer, find_idx_files, load_idx, open_source,
                            read_idx_images, read_idx_labels, synth_dataset)


def _write_idx(tmp_path, images, labels, gz=False, prefix="train"):
    names = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
             "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}[prefix]
    img = struct.pack(">IIII", 0x803, *images.shape) + images.astype(np.uint8).tobytes()
    lab = struct.pack(">II", 0x801, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()
    paths = []
    for name, blob in zip(names, (img, lab)):
        path = tmp_path / (name + (".gz" if gz else ""))
        path.write_bytes(gzip.compress(blob) if gz else blob)
        paths.append(str(path))
    return paths


@pytest.fixture
def idx_images(rng):
    return rng.integers(0, 256, size=(5, 28, 28)).astype(np.uint8)


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, idx_images, gz):
    ip, lp = _write_idx(tmp_path, idx_images, [0, 1, 2, 3, 9], gz=gz)
    np.testing.assert_array_equal(read_idx_images(ip), idx_images)
    np.testing.assert_array_equal(read_idx_labels(lp), [0, 1, 2, 3, 9])
    ds = load_idx(ip, lp)
    assert ds.images.shape == (5, 3, 28, 28)
    assert np.array_equal(ds.images[:, 0], ds.images[:, 2])


def test_idx_errors(tmp_path, idx_images):
    ip, lp = _write_idx(tmp_path, idx_images, [0, 1, 2, 3, 4])
    with pytest.raises(ValueError, match="magic"):
        read_idx_labels(ip)
    raw = open(ip, "rb").read()
    open(ip, "wb").write(raw[:-10])
    with pytest.raises(ValueError, match="截断"):
        read_idx_images(ip)
    with pytest.raises(FileNotFoundError):
        read_idx_labels(str(tmp_path / "missing"))


def test_idx_count_mismatch(tmp_path, idx_images):
    ip, lp = _write_idx(tmp_path, idx_images, [0, 1, 2])
    with pytest.raises(ValueError, match="不一致"):
        load_idx(ip, lp)


def test_idx_source_pads_to_32(tmp_path, idx_images):
    _write_idx(tmp_path, idx_images, [0, 1, 2, 3, 4], gz=True, prefix="test")
    assert len(find_idx_files(str(tmp_path), "test")) == 2
    logs = []
    ds = IdxSource(str(tmp_path), "test", logs.append).load()
    assert ds.extent == 32
    x, y = ds.batch(np.arange(2))
    assert x.shape == (2, 3, 32, 32) and x.dtype == np.float32
    assert np.all(x[:, :, :2] == 0) and np.all(x[:, :, -2:] == 0)
    np.testing.assert_array_equal(x[0, 0, 2:30, 2:30], idx_images[0])
    assert logs and "[系统]" in logs[0]
    with pytest.raises(FileNotFoundError):
        find_idx_files(str(tmp_path), "train")


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 4)), [0, 1])
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 4, 4)), [0])
    with pytest.raises(ValueError, match="标签"):
        Dataset(np.zeros((2, 3, 4, 4)), [0, 10])


def test_normalizer_statistics(rng):
    images = (rng.normal(size=(64, 3, 8, 8)) * np.array([2.0, 1.0, 0.5])[None, :, None, None]
              + np.array([1.0, -1.0, 0.0])[None, :, None, None])
    ds = Dataset(images.astype(np.float32), np.zeros(64))
    norm = Normalizer.from_dataset(ds, chunk=10)
    x = norm.apply(ds.images).astype(np.float64)
    np.testing.assert_allclose(x.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    np.testing.assert_allclose(x.std(axis=(0, 2, 3)), 1.0, atol=1e-4)
    again = Normalizer.from_dict(norm.to_dict())
    np.testing.assert_array_equal(again.mean, norm.mean)


def test_constant_channel_keeps_unit_std():
    ds = Dataset(np.ones((4, 3, 4, 4), dtype=np.float32), np.zeros(4))
    assert np.all(Normalizer.from_dataset(ds).std == 1.0)


def test_synthetic_is_balanced_and_reproducible():
    a = synth_dataset(10, 200, seed=3)
    b = synth_dataset(10, 200, seed=3)
    assert a.images.dtype == np.float32 and a.images.shape == (200, 3, 32, 32)
    np.testing.assert_array_equal(a.images, b.images)
    assert np.all(np.bincount(a.labels, minlength=10) == 20)
    assert not np.array_equal(a.images, synth_dataset(10, 200, seed=4).images)


def test_synthetic_classes_are_distinct_frequencies():
    ds = synth_dataset(16, 16, noise=0.0, channels=1)
    flat = ds.images.reshape(16, -1).astype(np.float64)
    flat /= np.linalg.norm(flat, axis=1, keepdims=True)
    gram = flat @ flat.T
    np.testing.assert_allclose(gram, np.eye(16), atol=1e-5)
    with pytest.raises(ValueError):
        synth_dataset(17, 10)


def test_open_source_splits_differ():
    train = open_source("synthetic", "train", n=50, seed=1).load()
    test = open_source("synthetic", "test", n=50, seed=1).load()
    assert train.split == "train" and test.split == "test"
    assert not np.array_equal(train.images, test.images)
    with pytest.raises(ValueError):
        open_source("mnist")
    with pytest.raises(ValueError):
        open_source("cifar")
