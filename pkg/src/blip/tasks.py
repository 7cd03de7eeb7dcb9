"""Task streams: MNIST IDX ingestion, class splits, pixel permutations and
synthetic Gaussian blobs.

Split and permuted streams never copy pixel data; every split keeps row
indices into one shared source array plus an optional column permutation.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class Split:
    source: np.ndarray
    rows: np.ndarray
    labels: np.ndarray
    perm: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def inputs(self, positions=None) -> np.ndarray:
        rows = self.rows if positions is None else self.rows[positions]
        x = self.source[rows]
        if self.perm is not None:
            x = x[:, self.perm]
        return x


@dataclass
class TaskData:
    task_id: int
    train: Split
    val: Split
    test: Split
    num_classes: int
    description: str = ""

    @property
    def input_dim(self) -> int:
        return self.train.source.shape[1]


@dataclass
class TaskStream:
    tasks: list[TaskData]
    name: str
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"task ids must be 1..T in order, got {ids}")

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def head_specs(self) -> list[tuple[int, int]]:
        return [(t.task_id, t.num_classes) for t in self.tasks]


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: unexpected EOF in header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise ValueError(f"{path}: not an IDX file of the expected kind (magic {found:#010x}, want {magic:#010x})")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: unexpected EOF in header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise ValueError(f"{path}: unexpected EOF: need {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] and flattened row-major."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise ValueError(f"count mismatch: {len(images)} images but {len(labels)} labels")
    flat = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return flat, labels.astype(np.int64)


def load_mnist(mnist_dir):
    """Train and test arrays from the four standard MNIST files (optionally ``.gz``)."""
    mnist_dir = Path(mnist_dir)
    paths = {}
    for key, name in MNIST_FILES.items():
        for candidate in (mnist_dir / name, mnist_dir / (name + ".gz")):
            if candidate.exists():
                paths[key] = candidate
                break
        else:
            raise FileNotFoundError(f"{mnist_dir / name} not found")
    train = load_idx(paths["train_images"], paths["train_labels"])
    test = load_idx(paths["test_images"], paths["test_labels"])
    return train, test


def _hold_out(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_out = int(round(n * fraction))
    return np.sort(order[n_out:]), np.sort(order[:n_out])


def build_split_stream(images, labels, classes_per_task: int, seed: int, test=None,
                       val_fraction: float = 0.1) -> TaskStream:
    """Consecutive class groups of size ``classes_per_task`` become tasks, relabelled from 0.

    ``test`` is an optional ``(images, labels)`` pair; without it a seeded
    ``val_fraction`` of each task is held out as the test split as well.
    """
    labels = np.asarray(labels)
    num_classes = int(labels.max()) + 1
    if classes_per_task < 1 or num_classes % classes_per_task:
        raise ValueError(f"{num_classes} classes cannot be split into groups of {classes_per_task}")
    rng = np.random.default_rng(seed)
    tasks = []
    for k in range(num_classes // classes_per_task):
        first = k * classes_per_task
        members = np.flatnonzero((labels >= first) & (labels < first + classes_per_task))
        keep, val = _hold_out(len(members), val_fraction, rng)
        train_rows, val_rows = members[keep], members[val]
        if test is None:
            keep, held = _hold_out(len(train_rows), val_fraction, rng)
            test_split = Split(images, train_rows[held], labels[train_rows[held]] - first)
            train_rows = train_rows[keep]
        else:
            t_images, t_labels = test
            t_rows = np.flatnonzero((t_labels >= first) & (t_labels < first + classes_per_task))
            test_split = Split(t_images, t_rows, np.asarray(t_labels)[t_rows] - first)
        classes = list(range(first, first + classes_per_task))
        tasks.append(TaskData(
            task_id=k + 1,
            train=Split(images, train_rows, labels[train_rows] - first),
            val=Split(images, val_rows, labels[val_rows] - first),
            test=test_split,
            num_classes=classes_per_task,
            description=f"classes {classes}",
        ))
    return TaskStream(tasks, f"split{num_classes // classes_per_task}", seed)


def build_permuted_stream(images, labels, num_tasks: int, seed: int, test=None,
                          val_fraction: float = 0.1) -> TaskStream:
    """Task 1 sees the raw images, task k > 1 a fixed seeded pixel shuffle of them."""
    if num_tasks < 1:
        raise ValueError("num_tasks must be at least 1")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    dim = images.shape[1]
    perms = [None]
    seen = set()
    while len(perms) < num_tasks:
        p = rng.permutation(dim)
        key = p.tobytes()
        if key in seen or (p == np.arange(dim)).all():
            continue
        seen.add(key)
        perms.append(p)
    num_classes = int(labels.max()) + 1
    tasks = []
    for k, perm in enumerate(perms):
        keep, val = _hold_out(len(labels), val_fraction, rng)
        if test is None:
            keep_t, held = _hold_out(len(keep), val_fraction, rng)
            test_split = Split(images, keep[held], labels[keep[held]], perm)
            keep = keep[keep_t]
        else:
            t_images, t_labels = test
            test_split = Split(t_images, np.arange(len(t_labels)), np.asarray(t_labels), perm)
        tasks.append(TaskData(
            task_id=k + 1,
            train=Split(images, keep, labels[keep], perm),
            val=Split(images, val, labels[val], perm),
            test=test_split,
            num_classes=num_classes,
            description="identity" if perm is None else f"permutation {k}",
        ))
    return TaskStream(tasks, f"pmnist{num_tasks}", seed, meta={"permutations": perms})


def build_gaussian_stream(num_tasks: int, classes: int, dim: int, samples_per_class: int,
                          separation: float, seed: int) -> TaskStream:
    """Isotropic unit-variance blobs whose means sit on a sphere of radius ``separation``."""
    if separation < 0:
        raise ValueError("separation must be non-negative")
    if samples_per_class < 10:
        raise ValueError("need at least 10 samples per class for an 80/10/10 split")
    rng = np.random.default_rng(seed)
    tasks = []
    for k in range(num_tasks):
        directions = rng.standard_normal((classes, dim))
        means = separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
        y = np.repeat(np.arange(classes), samples_per_class)
        x = means[y] + rng.standard_normal((len(y), dim))
        order = rng.permutation(len(y))
        n_train = int(round(0.8 * len(y)))
        n_val = int(round(0.1 * len(y)))
        parts = np.split(order, [n_train, n_train + n_val])
        train, val, test = (Split(x, np.sort(p), y[np.sort(p)]) for p in parts)
        tasks.append(TaskData(k + 1, train, val, test, classes, f"gaussian blobs {k + 1}"))
    return TaskStream(tasks, f"gaussian{num_tasks}", seed)
