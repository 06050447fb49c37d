"""MNIST / Fashion-MNIST ingestion from IDX files, canvas placement and batching."""
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError

DATASETS = ("mnist", "fashion_mnist")
SPLITS = {"train": "train", "test": "t10k"}
DEFAULT_DATA_DIR = "data"
_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


class DataError(IOError):
    """A dataset file is missing or malformed."""


@dataclass
class CanvasImage:
    pixels: np.ndarray  # [H, W] float32 in [0, 1]
    label: int


@dataclass
class Batch:
    images: np.ndarray  # [B, H, W]
    labels: np.ndarray  # [B]
    indices: np.ndarray  # [B] positions in the source dataset


class CanvasDataset:
    """Immutable array-backed sequence of :class:`CanvasImage`."""

    def __init__(self, images, labels, name=""):
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError("image and label counts differ")
        self.name = name

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return CanvasImage(self.images[i], int(self.labels[i]))

    def subset(self, indices):
        indices = np.asarray(indices)
        return CanvasDataset(self.images[indices], self.labels[indices], self.name)

    @property
    def canvas_size(self):
        return self.images.shape[-1]


def data_dir():
    return Path(os.environ.get("SCAE_DATA_DIR", DEFAULT_DATA_DIR))


def read_idx(path):
    """Read an IDX file (optionally gzip-compressed) into a numpy array."""
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            path = gz
        else:
            raise DataError(f"dataset file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise DataError(f"corrupt IDX header in {path}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"truncated IDX header in {path}")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_DTYPES[raw[2]])
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) - header != expected:
        raise DataError(f"IDX payload of {path} has {len(raw) - header} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(shape)


def place_on_canvas(src, mode="center", rng=None, canvas_size=40):
    """Copy ``src`` into a zero canvas, centered or at a uniformly random offset."""
    src = np.asarray(src, dtype=np.float32)
    h, w = src.shape
    if h > canvas_size or w > canvas_size:
        raise ConfigError(f"source image {h}x{w} does not fit a {canvas_size}x{canvas_size} canvas")
    if mode == "center":
        top, left = (canvas_size - h) // 2, (canvas_size - w) // 2
    elif mode == "random_shift":
        if rng is None:
            raise ConfigError("random_shift placement needs an rng")
        top = int(rng.integers(0, canvas_size - h + 1))
        left = int(rng.integers(0, canvas_size - w + 1))
    else:
        raise ConfigError(f"unknown placement mode {mode!r}")
    canvas = np.zeros((canvas_size, canvas_size), dtype=np.float32)
    canvas[top:top + h, left:left + w] = src
    return canvas


def place_batch(sources, canvas_size=40):
    """Vectorized center placement of ``[N, h, w]`` images."""
    n, h, w = sources.shape
    if h > canvas_size or w > canvas_size:
        raise ConfigError(f"source images {h}x{w} do not fit a {canvas_size}x{canvas_size} canvas")
    top, left = (canvas_size - h) // 2, (canvas_size - w) // 2
    out = np.zeros((n, canvas_size, canvas_size), dtype=np.float32)
    out[:, top:top + h, left:left + w] = sources
    return out


def load_dataset(name, split, canvas_size=40, mode="center", rng=None, root=None):
    """Load a dataset split as a :class:`CanvasDataset` of ``canvas_size`` canvases.

    Files are looked up as ``<root>/<name>/<train|t10k>-{images-idx3,labels-idx1}-ubyte[.gz]``
    where ``root`` defaults to ``$SCAE_DATA_DIR``.
    """
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {DATASETS}")
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected 'train' or 'test'")
    base = Path(root) if root is not None else data_dir()
    prefix = base / name / SPLITS[split]
    images = read_idx(f"{prefix}-images-idx3-ubyte")
    labels = read_idx(f"{prefix}-labels-idx1-ubyte")
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise DataError(f"inconsistent image/label files under {prefix}")
    sources = images.astype(np.float32) / 255.0
    if mode == "center":
        canvases = place_batch(sources, canvas_size)
    else:
        canvases = np.stack([place_on_canvas(s, mode, rng, canvas_size) for s in sources])
    return CanvasDataset(canvases, labels, name=f"{name}/{split}")


def batches(dataset, batch_size, shuffle=False, rng=None):
    """Yield :class:`Batch` objects covering every item exactly once; the last may be short."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle:
        if rng is None:
            raise ConfigError("shuffling needs an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(dataset.images[idx], dataset.labels[idx], idx)
