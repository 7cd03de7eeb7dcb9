import os
import struct
from pathlib import Path

import numpy as np
import pytest

from blip.config import RunConfig, config_from_dict
from blip.nn import Network, NetworkSpec

MNIST_DIR = Path(os.environ.get("BLIP_MNIST_DIR", "/root/data/mnist"))

# (criterion number, line) pairs filled by tests/test_acceptance.py
ACCEPTANCE_LINES: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def have_mnist() -> bool:
    return (MNIST_DIR / "train-images-idx3-ubyte").exists() or (MNIST_DIR / "train-images-idx3-ubyte.gz").exists()


def write_idx(path, array, magic=None):
    array = np.asarray(array, dtype=np.uint8)
    if magic is None:
        magic = 0x803 if array.ndim == 3 else 0x801
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def logistic_net(theta=0.0):
    """Input 1 -> hidden 1 (weight 1) -> 2-class head with logits [0, theta * h].

    Class 1 then has probability sigmoid(theta * x) for x >= 0. Returns the
    network and the index of ``theta`` in the flat parameter vector.
    """
    spec = NetworkSpec(1, (1,), ((1, 2),))
    net = Network.build(spec)
    net.params[0] = 1.0  # hidden weight; hidden bias stays 0
    head = net.head(1)
    idx = head.offset + 1  # weight row 0, column 1
    net.params[idx] = theta
    return net, idx


def small_net(seed=0, input_dim=5, hidden=(7, 6), heads=((1, 3), (2, 4))):
    spec = NetworkSpec(input_dim, hidden, heads)
    return Network.build(spec, 6.0, 20, np.random.default_rng(seed))


def gaussian_config(out_dir="unused", **overrides) -> RunConfig:
    data = {
        "stream": {"name": "gaussian", "num_tasks": 5, "classes": 3, "dim": 16,
                   "samples_per_class": 100, "separation": 3.0},
        "model": {"hidden_dims": [32, 32]},
        "seeds": [0],
        "out_dir": str(out_dir),
    }
    for key, value in overrides.items():
        section, _, name = key.partition("__")
        if name:
            data.setdefault(section, {})[name] = value
        else:
            data[section] = value
    return config_from_dict(data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
