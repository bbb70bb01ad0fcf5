import gzip
import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from dpvger.config import ExperimentConfig
from dpvger.nn import Activation, init_mlp
from dpvger.rng import RngState
from dpvger.tasks import RawDataset

SRC_DIR = Path(__file__).parent.parent / "src"


def make_digits(per_class: int, side: int = 8, seed: int = 0) -> RawDataset:
    """Separable fake digits: digit d lights every pixel whose index is d mod 10."""
    gen = np.random.default_rng(seed)
    width = side * side
    labels = np.repeat(np.arange(10), per_class)
    gen.shuffle(labels)
    pattern = (np.arange(width)[None, :] % 10) == labels[:, None]
    images = np.where(pattern, 0.9, 0.1) + gen.uniform(-0.05, 0.05, (labels.size, width))
    images = np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    return RawDataset(images=images, labels=labels.astype(np.int64))


def write_idx(
    directory: Path, prefix: str, raw: RawDataset, side: int, compress: bool = False
) -> None:
    count = len(raw)
    pixels = np.round(raw.images * 255.0).astype(np.uint8).tobytes()
    image_bytes = (
        (0x00000803).to_bytes(4, "big")
        + count.to_bytes(4, "big")
        + side.to_bytes(4, "big")
        + side.to_bytes(4, "big")
        + pixels
    )
    label_bytes = (
        (0x00000801).to_bytes(4, "big")
        + count.to_bytes(4, "big")
        + raw.labels.astype(np.uint8).tobytes()
    )
    names = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }[prefix]
    for name, payload in zip(names, (image_bytes, label_bytes)):
        if compress:
            with gzip.open(directory / f"{name}.gz", "wb") as handle:
                handle.write(payload)
        else:
            (directory / name).write_bytes(payload)


@pytest.fixture
def rng():
    return RngState(1234)


@pytest.fixture
def tiny_mlp(rng):
    return init_mlp([4, 5, 3], rng, Activation.IDENTITY)


@pytest.fixture
def digits_train():
    return make_digits(per_class=40, seed=1)


@pytest.fixture
def digits_test():
    return make_digits(per_class=10, seed=2)


@pytest.fixture
def mnist_dir(tmp_path, digits_train, digits_test):
    write_idx(tmp_path, "train", digits_train, side=8)
    write_idx(tmp_path, "test", digits_test, side=8)
    return tmp_path


@pytest.fixture
def small_config(tmp_path):
    """Fast experiment settings for 8x8 fake digits on two tasks."""

    def _build(method: str, **overrides) -> ExperimentConfig:
        data = {
            "method": method,
            "seed": 7,
            "out_dir": str(tmp_path / f"run-{method}"),
            "tasks": {
                "scale_factor": 2,
                "per_class_cap": None,
                "public_fraction": 0.1,
                "task_pairs": [(0, 1), (2, 3)],
            },
            "bnn": {
                "hidden_widths": [8],
                "epochs": 2,
                "batch_size": 16,
                "learning_rate": 0.01,
                "eval_samples": 3,
            },
            "gan": {
                "latent_dim": 4,
                "generator_widths": [8],
                "discriminator_widths": [8],
                "batch_size": 16,
                "epochs": 2,
                "public_epochs": 1,
            },
            "dp": {},
        }
        for key, value in overrides.items():
            section, _, name = key.partition("__")
            if name:
                data[section][name] = value
            else:
                data[key] = value
        return ExperimentConfig.from_dict(data)

    return _build


@pytest.fixture
def cli_env():
    env = dict(os.environ)
    env["PYTHONPATH"] = str(SRC_DIR) + os.pathsep + env.get("PYTHONPATH", "")
    env["COLUMNS"] = "200"
    return env
