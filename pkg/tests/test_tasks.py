import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blip.engine import run_continual
from blip.tasks import (
    build_gaussian_stream,
    build_permuted_stream,
    build_split_stream,
    load_idx,
    load_mnist,
)
from conftest import MNIST_DIR, gaussian_config, have_mnist, write_idx

needs_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST not found in {MNIST_DIR}")


@pytest.fixture
def toy_idx(tmp_path):
    images = np.arange(3 * 2 * 2, dtype=np.uint8).reshape(3, 2, 2)
    images[0, 0, 0] = 255
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lbl", np.array([7, 0, 3]))
    return tmp_path


def _toy_digits(n_per_class=20, classes=10, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    return rng.random((len(labels), dim)), labels


class TestIdx:
    def test_reads_and_scales(self, toy_idx):
        x, y = load_idx(toy_idx / "img", toy_idx / "lbl")
        assert x.shape == (3, 4) and x.dtype == np.float64
        assert x[0, 0] == 1.0 and x[0, 1] == 1 / 255
        assert y.tolist() == [7, 0, 3]

    def test_gzip(self, toy_idx):
        for name in ("img", "lbl"):
            (toy_idx / f"{name}.gz").write_bytes(gzip.compress((toy_idx / name).read_bytes()))
        x, _ = load_idx(toy_idx / "img.gz", toy_idx / "lbl.gz")
        assert x.shape == (3, 4)

    def test_wrong_magic(self, toy_idx):
        write_idx(toy_idx / "bad", np.zeros((3, 2, 2)), magic=0x801)
        with pytest.raises(ValueError, match="not an IDX file"):
            load_idx(toy_idx / "bad", toy_idx / "lbl")
        with pytest.raises(ValueError, match="not an IDX file"):
            load_idx(toy_idx / "img", toy_idx / "img")

    def test_truncated(self, toy_idx):
        raw = (toy_idx / "img").read_bytes()
        (toy_idx / "short").write_bytes(raw[:-1])
        with pytest.raises(ValueError, match="unexpected EOF"):
            load_idx(toy_idx / "short", toy_idx / "lbl")
        (toy_idx / "stub").write_bytes(raw[:6])
        with pytest.raises(ValueError, match="unexpected EOF"):
            load_idx(toy_idx / "stub", toy_idx / "lbl")

    def test_count_mismatch(self, toy_idx):
        write_idx(toy_idx / "lbl2", np.array([1, 2]))
        with pytest.raises(ValueError, match="count mismatch"):
            load_idx(toy_idx / "img", toy_idx / "lbl2")

    def test_missing_directory_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_mnist(tmp_path)

    @needs_mnist
    def test_real_mnist(self):
        (x, y), (tx, ty) = load_mnist(MNIST_DIR)
        assert x.shape == (60000, 784) and tx.shape == (10000, 784)
        assert x.min() == 0.0 and x.max() == 1.0
        assert np.bincount(y).tolist()[:2] == [5923, 6742]


class TestSplit:
    def test_five_pairs(self):
        x, y = _toy_digits()
        stream = build_split_stream(x, y, 2, seed=0)
        assert len(stream) == 5
        assert stream.tasks[0].description == "classes [0, 1]"
        for task in stream.tasks:
            for part in (task.train, task.val, task.test):
                assert set(part.labels.tolist()) <= {0, 1}
            assert task.num_classes == 2

    def test_single_task_keeps_labels(self):
        x, y = _toy_digits()
        stream = build_split_stream(x, y, 10, seed=0)
        task = stream.tasks[0]
        rows = np.concatenate([task.train.rows, task.val.rows, task.test.rows])
        assert (np.concatenate([task.train.labels, task.val.labels, task.test.labels]) == y[rows]).all()

    def test_partition(self):
        x, y = _toy_digits()
        stream = build_split_stream(x, y, 2, seed=3)
        rows = np.concatenate([np.concatenate([t.train.rows, t.val.rows, t.test.rows]) for t in stream.tasks])
        assert sorted(rows.tolist()) == list(range(len(y)))

    def test_val_fraction(self):
        x, y = _toy_digits(n_per_class=100)
        task = build_split_stream(x, y, 2, seed=0, test=(x, y)).tasks[0]
        assert len(task.val) == 20 and len(task.train) == 180 and len(task.test) == 200

    def test_indivisible(self):
        x, y = _toy_digits()
        with pytest.raises(ValueError):
            build_split_stream(x, y, 3, seed=0)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_deterministic(self, seed):
        x, y = _toy_digits()
        a, b = build_split_stream(x, y, 5, seed), build_split_stream(x, y, 5, seed)
        for ta, tb in zip(a.tasks, b.tasks):
            assert ta.train.rows.tolist() == tb.train.rows.tolist()
            assert ta.val.rows.tolist() == tb.val.rows.tolist()


class TestPermuted:
    def test_identity_first(self):
        x, y = _toy_digits()
        stream = build_permuted_stream(x, y, 4, seed=0, test=(x, y))
        assert stream.tasks[0].test.inputs().tobytes() == x.tobytes()
        assert all(t.num_classes == 10 for t in stream.tasks)

    def test_distinct_permutations(self):
        x, y = _toy_digits(dim=30)
        perms = build_permuted_stream(x, y, 6, seed=1).meta["permutations"]
        keys = {p.tobytes() for p in perms[1:]}
        assert len(keys) == 5 and perms[0] is None

    def test_inverse_restores(self):
        x, y = _toy_digits(dim=30)
        stream = build_permuted_stream(x, y, 3, seed=1, test=(x, y))
        perm = stream.meta["permutations"][2]
        assert (stream.tasks[2].test.inputs()[:, np.argsort(perm)] == x).all()

    def test_counts_and_label_marginals(self):
        x, y = _toy_digits()
        stream = build_permuted_stream(x, y, 3, seed=1)
        sizes = {(len(t.train), len(t.val), len(t.test)) for t in stream.tasks}
        assert len(sizes) == 1
        for t in stream.tasks:
            rows = np.concatenate([t.train.rows, t.val.rows, t.test.rows])
            assert np.bincount(y[rows]).tolist() == [20] * 10

    @needs_mnist
    def test_real_pmnist_shapes(self):
        (x, y), test = load_mnist(MNIST_DIR)
        stream = build_permuted_stream(x, y, 2, seed=0, test=test)
        assert stream.tasks[1].test.inputs(np.arange(5)).shape == (5, 784)
        assert len(stream.tasks[1].train) == 54000


class TestGaussian:
    def test_split_sizes(self):
        stream = build_gaussian_stream(2, 3, 16, 100, 3.0, seed=0)
        task = stream.tasks[0]
        assert (len(task.train), len(task.val), len(task.test)) == (240, 30, 30)
        assert task.input_dim == 16

    def test_deterministic(self):
        a = build_gaussian_stream(2, 3, 4, 20, 3.0, seed=5)
        b = build_gaussian_stream(2, 3, 4, 20, 3.0, seed=5)
        assert a.tasks[1].train.inputs().tobytes() == b.tasks[1].train.inputs().tobytes()

    def test_negative_separation(self):
        with pytest.raises(ValueError):
            build_gaussian_stream(1, 3, 4, 20, -1.0, seed=0)

    def test_wide_margin_is_learnable(self):
        config = gaussian_config(stream__separation=10.0, stream__samples_per_class=200, strategy="ft",
                                 model__hidden_dims=[32], optim__max_epochs=30)
        s = config.stream
        stream = build_gaussian_stream(s.num_tasks, s.classes, s.dim, s.samples_per_class, s.separation, 0)
        report = run_continual(stream, config, 0)
        diagonal = [report.matrix[i, i] for i in range(len(stream))]
        assert min(diagonal) >= 0.99

    def test_zero_separation_is_chance(self):
        config = gaussian_config(stream__separation=0.0, stream__num_tasks=1, stream__samples_per_class=1000,
                                 strategy="ft", optim__max_epochs=10)
        s = config.stream
        stream = build_gaussian_stream(1, s.classes, s.dim, s.samples_per_class, 0.0, 0)
        report = run_continual(stream, config, 0)
        assert abs(report.acc - 1 / 3) < 0.1
