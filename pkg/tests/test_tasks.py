import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oacl.errors import ConfigError, DataError, GenerationError
from oacl.tasks import (NOISE_SIGMA, export_csv, gen_base, gen_task_stream,
                        import_csv, random_orthogonal, reorder)


class TestClusterGeometry:
    def test_means_unit_norm_and_separated(self):
        base = gen_base(0, 8, 32, 200)
        # recover per-class empirical means; they concentrate near the true
        # unit-norm means at this sample size
        x, y = base.train
        for c in range(8):
            m = x[y == c].mean(axis=0)
            assert abs(np.linalg.norm(m) - 1.0) < 0.2

    def test_pairwise_angle_at_least_60_degrees(self):
        from oacl.tasks import _cluster_means
        m = _cluster_means(3, 8, 32)
        gram = m @ m.T
        np.fill_diagonal(gram, 0.0)
        assert np.abs(gram).max() <= 0.5 + 1e-12
        assert np.allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-12)

    def test_infeasible_geometry_raises(self):
        with pytest.raises(GenerationError):
            gen_base(0, 8, 4, 10)  # d_in < C

    def test_noise_scale(self):
        x, y = gen_base(1, 8, 32, 200).train
        resid = np.concatenate([x[y == c] - x[y == c].mean(axis=0)
                                for c in range(8)])
        assert abs(resid.std() - NOISE_SIGMA) < 0.02


class TestSplits:
    def test_split_sizes(self):
        stream = gen_task_stream(0, 2, 8, 32, n_train_per_class=250)
        for task in stream.tasks:
            assert task.train[0].shape == (2000, 32)
            assert task.val[0].shape == (400, 32)
            assert task.test[0].shape == (800, 32)

    def test_splits_are_disjoint_draws(self):
        task = gen_task_stream(0, 1, 8, 32, n_train_per_class=50).tasks[0]
        tr = {row.tobytes() for row in task.train[0]}
        assert not any(row.tobytes() in tr for row in task.test[0])

    def test_class_balance(self):
        task = gen_task_stream(0, 1, 8, 32, n_train_per_class=250).tasks[0]
        counts = np.bincount(task.train[1], minlength=8)
        assert np.array_equal(counts, np.full(8, 250))

    def test_invalid_sizes_rejected(self):
        with pytest.raises(DataError):
            gen_task_stream(0, 2, 8, 32, n_train_per_class=0)
        with pytest.raises(ConfigError):
            gen_task_stream(0, 0, 8, 32)
        with pytest.raises(ConfigError):
            gen_task_stream(0, 2, 8, 32, shift="scaling")


class TestDeterminismAndShift:
    def test_same_seed_is_bitwise_identical(self):
        a = gen_task_stream(7, 3, 8, 32)
        b = gen_task_stream(7, 3, 8, 32)
        for ta, tb in zip(a.tasks, b.tasks):
            assert np.array_equal(ta.train[0], tb.train[0])
            assert np.array_equal(ta.train[1], tb.train[1])

    def test_different_seeds_differ(self):
        a = gen_task_stream(7, 1, 8, 32)
        b = gen_task_stream(8, 1, 8, 32)
        assert not np.array_equal(a.tasks[0].train[0], b.tasks[0].train[0])

    def test_task1_is_base_distribution(self):
        # task 1 has no rotation; its class means match the base dataset's
        # (independent noise draws, so only approximately)
        base = gen_base(5, 8, 32, 250)
        stream = gen_task_stream(5, 2, 8, 32, n_train_per_class=250)
        t1 = stream.tasks[0]
        assert t1.descriptor["rotation_seed"] is None
        for c in range(8):
            mb = base.train[0][base.train[1] == c].mean(axis=0)
            mt = t1.train[0][t1.train[1] == c].mean(axis=0)
            assert np.linalg.norm(mb - mt) < 0.3

    def test_rotation_applied_exactly(self):
        # pin the task-2 rotation via the override hook: the two streams share
        # pre-rotation draws, so the data differ by exactly the rotation
        q = random_orthogonal(np.random.default_rng(99), 32)
        ident = gen_task_stream(2, 2, 8, 32, rotation_override={2: np.eye(32)})
        rotated = gen_task_stream(2, 2, 8, 32, rotation_override={2: q})
        assert np.allclose(rotated.tasks[1].train[0],
                           ident.tasks[1].train[0] @ q.T, atol=1e-12)
        assert np.allclose(np.linalg.norm(rotated.tasks[1].train[0], axis=1),
                           np.linalg.norm(ident.tasks[1].train[0], axis=1),
                           atol=1e-10)

    def test_rotation_moves_the_data(self):
        ident = gen_task_stream(2, 2, 8, 32, rotation_override={2: np.eye(32)})
        stream = gen_task_stream(2, 2, 8, 32)
        assert not np.allclose(ident.tasks[1].train[0],
                               stream.tasks[1].train[0], atol=1e-3)

    def test_relabel_permutes_labels_only(self):
        plain = gen_task_stream(3, 2, 8, 32)
        rel = gen_task_stream(3, 2, 8, 32, shift="rotation+relabel")
        assert np.array_equal(plain.tasks[1].train[0], rel.tasks[1].train[0])
        perm = rel.tasks[1].descriptor["label_permutation"]
        assert sorted(perm) == list(range(8))
        assert np.array_equal(np.array(perm)[plain.tasks[1].train[1]],
                              rel.tasks[1].train[1])
        assert rel.tasks[0].descriptor["label_permutation"] is None

    @given(st.integers(min_value=0, max_value=2 ** 32 - 1),
           st.integers(min_value=2, max_value=16))
    @settings(max_examples=50, deadline=None)
    def test_random_orthogonal_is_orthogonal(self, seed, n):
        q = random_orthogonal(np.random.default_rng(seed), n)
        assert np.abs(q @ q.T - np.eye(n)).max() < 1e-10
        assert abs(abs(np.linalg.det(q)) - 1.0) < 1e-10


class TestReorder:
    def test_reorder_permutes_tasks(self):
        stream = gen_task_stream(0, 4, 8, 32, n_train_per_class=10)
        r = reorder(stream, [3, 1, 4, 2])
        assert [t.task_id for t in r.tasks] == [3, 1, 4, 2]
        assert r.order_id == "3-1-4-2"

    def test_invalid_permutation(self):
        stream = gen_task_stream(0, 3, 8, 32, n_train_per_class=10)
        with pytest.raises(ConfigError):
            reorder(stream, [1, 2, 2])
        with pytest.raises(ConfigError):
            reorder(stream, [0, 1, 2])


class TestCsvRoundTrip:
    def test_export_import_is_bitwise_exact(self, tmp_path):
        split = gen_base(9, 8, 32, 5).val
        p = tmp_path / "split.csv"
        export_csv(split, p)
        x, y = import_csv(p)
        assert np.array_equal(x, split[0])
        assert np.array_equal(y, split[1])

    def test_import_rejects_non_dataset(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(DataError):
            import_csv(p)

    def test_import_rejects_empty(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("x0,label\n")
        with pytest.raises(DataError):
            import_csv(p)
