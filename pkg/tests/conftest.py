import os
from pathlib import Path

import numpy as np
import pytest
import torch

from scae_defense.config import ScaeConfig
from scae_defense.model import init_model

# small enough for float64 finite differences
TOY = dict(canvas_size=14, num_part_capsules=4, num_object_capsules=4, template_size=5,
           part_cnn="1x(4:2)-1x(4:1)", set_transformer="1x(1-8)-8", attribute_dim=3)

DATA_ROOT = Path(os.environ.get("SCAE_DATA_DIR", "/root/data"))


def mnist_available():
    return (DATA_ROOT / "mnist" / "t10k-images-idx3-ubyte").exists() or \
        (DATA_ROOT / "mnist" / "t10k-images-idx3-ubyte.gz").exists()


needs_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST IDX files not found under {DATA_ROOT}")


@pytest.fixture
def toy_config():
    return ScaeConfig(**TOY)


@pytest.fixture
def toy_model(toy_config):
    return init_model(toy_config, seed=3).double()


@pytest.fixture
def toy_images():
    g = torch.Generator().manual_seed(11)
    return torch.rand(3, 14, 14, generator=g, dtype=torch.float64)


def write_idx(path, array):
    """Write ``array`` (uint8) as an IDX file; used to build tiny dataset fixtures."""
    array = np.asarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    Path(path).write_bytes(header + array.tobytes())


@pytest.fixture
def tiny_mnist(tmp_path):
    """A 30-image fake MNIST tree under ``tmp_path``."""
    rng = np.random.default_rng(0)
    base = tmp_path / "mnist"
    base.mkdir()
    for split, n in (("train", 30), ("t10k", 20)):
        write_idx(base / f"{split}-images-idx3-ubyte", rng.integers(0, 256, (n, 28, 28)))
        write_idx(base / f"{split}-labels-idx1-ubyte", np.arange(n) % 10)
    return tmp_path
