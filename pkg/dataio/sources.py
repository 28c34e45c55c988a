# dataio/sources.py
# MIT License - See LICENSE for details
import gzip
import math
import os
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace

import numpy as np

from core.dct2d import dct_matrix
from core.settings import silent_log

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_SYNTH_CLASSES = 16
# 标准 MNIST 文件名 (可带 .gz)
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Normalizer:
    """逐通道归一化 (x - mean) / std；统计量只来自训练集"""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_dataset(cls, ds: "Dataset", chunk: int = 4096) -> "Normalizer":
        C = ds.images.shape[1]
        total = np.zeros(C)
        sq = np.zeros(C)
        count = 0
        for start in range(0, len(ds), chunk):
            x = ds.images[start:start + chunk].astype(np.float64)
            total += x.sum(axis=(0, 2, 3))
            sq += (x * x).sum(axis=(0, 2, 3))
            count += x.shape[0] * x.shape[2] * x.shape[3]
        mean = total / count
        std = np.sqrt(np.maximum(sq / count - mean * mean, 0.0))
        std[std < 1e-8] = 1.0
        return cls(mean, std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = x.astype(np.float32)
        return (x - self.mean.astype(np.float32)[None, :, None, None]) / self.std.astype(np.float32)[None, :, None, None]

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class Dataset:
    images: np.ndarray          # N×C×H×W，uint8 或 float32
    labels: np.ndarray          # N，int64
    split: str = "train"
    num_classes: int = 10
    pad_to: int = None          # 取批时居中补零到 pad_to×pad_to

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4:
            raise ValueError(f"数据集图像必须是 N×C×H×W，当前 {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"图像数 {self.images.shape[0]} 与标签数 {self.labels.shape[0]} 不一致")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"标签超出 [0, {self.num_classes})")

    def __len__(self):
        return self.images.shape[0]

    @property
    def extent(self) -> int:
        return self.pad_to or max(self.images.shape[2:])

    def fit_extent(self, multiple: int = 32) -> "Dataset":
        """28×28 之类的尺寸补零到 multiple 的整数倍"""
        H, W = self.images.shape[2:]
        target = int(math.ceil(max(H, W) / multiple) * multiple)
        return replace(self, pad_to=None if (H, W) == (target, target) else target)

    def take(self, n: int) -> "Dataset":
        return replace(self, images=self.images[:n], labels=self.labels[:n])

    def batch(self, idx, norm: Normalizer = None):
        """按索引取一批 (float32 图像, 标签)，先归一化再补零"""
        x = self.images[idx]
        x = norm.apply(x) if norm is not None else x.astype(np.float32)
        if self.pad_to:
            H, W = x.shape[2:]
            top, left = (self.pad_to - H) // 2, (self.pad_to - W) // 2
            x = np.pad(x, ((0, 0), (0, 0), (top, self.pad_to - H - top), (left, self.pad_to - W - left)))
        return x, self.labels[idx]


class DataSource(ABC):
    def __init__(self, log_callback=None):
        self.log = log_callback or silent_log

    @abstractmethod
    def load(self) -> Dataset: ...


def _open(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"数据文件不存在: {path}")
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"IDX 文件被截断: {what} 需要 {n} 字节，实际 {len(buf)}")
    return buf


def read_idx_images(path) -> np.ndarray:
    """返回 N×H×W uint8"""
    with _open(path) as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "图像文件头"))
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"不是 IDX 图像文件 ({path})，magic=0x{magic:08x}")
        data = np.frombuffer(_read_exact(f, count * rows * cols, "图像数据"), dtype=np.uint8)
    return data.reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open(path) as f:
        magic, count = struct.unpack(">II", _read_exact(f, 8, "标签文件头"))
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"不是 IDX 标签文件 ({path})，magic=0x{magic:08x}")
        data = np.frombuffer(_read_exact(f, count, "标签数据"), dtype=np.uint8)
    return data.astype(np.int64)


def load_idx(images_path, labels_path, split="train", channels=3, num_classes=10) -> Dataset:
    """IDX (MNIST) 文件 → Dataset；灰度复制到 channels 个通道"""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"IDX 图像数 {images.shape[0]} 与标签数 {labels.shape[0]} 不一致")
    images = np.repeat(images[:, None], channels, axis=1)
    return Dataset(images, labels, split=split, num_classes=num_classes)


def find_idx_files(data_dir, split):
    names = IDX_FILES[split]
    found = []
    for name in names:
        for candidate in (name, name + ".gz", name.replace("-idx", ".idx")):
            path = os.path.join(data_dir, candidate)
            if os.path.exists(path):
                found.append(path)
                break
        else:
            raise FileNotFoundError(f"在 {data_dir} 下找不到 {name}[.gz]")
    return found


def _class_basis(classes: int, extent: int) -> np.ndarray:
    # 类别 c 对应 DCT 基函数 (c mod 4, c div 4)
    C = dct_matrix(extent) * math.sqrt(extent / 2.0)
    return np.stack([np.outer(C[c % 4], C[c // 4]) for c in range(classes)])


def synth_dataset(classes: int, n: int, extent: int = 32, seed: int = 0, noise: float = 0.3,
                  channels: int = 3, split="train") -> Dataset:
    """
    合成分类数据: 类别 c 是频率 (c mod 4, c div 4) 的余弦图案，
    振幅 U(0.5, 1.5)，三通道相同图案 + 独立高斯噪声。
    """
    if not 1 <= classes <= MAX_SYNTH_CLASSES:
        raise ValueError(f"synth_dataset: classes 必须在 [1, {MAX_SYNTH_CLASSES}] 内，当前 {classes}")
    if n < 1 or extent < 4:
        raise ValueError(f"synth_dataset: n >= 1 且 extent >= 4，当前 n={n} extent={extent}")
    rng = np.random.default_rng(seed)
    basis = _class_basis(classes, extent)
    labels = rng.permutation(np.arange(n) % classes)
    amp = rng.uniform(0.5, 1.5, size=n)
    images = amp[:, None, None, None] * basis[labels][:, None]
    images = np.repeat(images, channels, axis=1)
    if noise > 0:
        images = images + noise * rng.normal(size=images.shape)
    return Dataset(images.astype(np.float32), labels, split=split, num_classes=classes)


class IdxSource(DataSource):
    def __init__(self, data_dir, split="train", log_callback=None):
        super().__init__(log_callback)
        self.data_dir = data_dir
        self.split = split

    def load(self) -> Dataset:
        images_path, labels_path = find_idx_files(self.data_dir, self.split)
        ds = load_idx(images_path, labels_path, split=self.split).fit_extent()
        self.log(f"[系统] 已读取 {self.split} 集 {len(ds)} 张 ({images_path})")
        return ds


class SyntheticSource(DataSource):
    def __init__(self, classes=10, n=1024, extent=32, seed=0, noise=0.3, split="train", log_callback=None):
        super().__init__(log_callback)
        self.classes = classes
        self.n = n
        self.extent = extent
        self.seed = seed
        self.noise = noise
        self.split = split

    def load(self) -> Dataset:
        ds = synth_dataset(self.classes, self.n, self.extent, self.seed, self.noise, split=self.split)
        self.log(f"[系统] 已生成合成 {self.split} 集 {len(ds)} 张 ({self.classes} 类, {self.extent}px)")
        return ds


def open_source(name: str, split="train", data_dir=None, n=None, seed=0, log_callback=None) -> DataSource:
    """mnist | synthetic"""
    if name == "mnist":
        if not data_dir:
            raise ValueError("mnist 数据集需要 --data 目录")
        return IdxSource(data_dir, split, log_callback)
    if name == "synthetic":
        # 训练/测试用不同种子
        return SyntheticSource(n=n or (2048 if split == "train" else 512),
                               seed=seed if split == "train" else seed + 10_000,
                               split=split, log_callback=log_callback)
    raise ValueError(f"未知数据集 {name}，可选 mnist / synthetic")
