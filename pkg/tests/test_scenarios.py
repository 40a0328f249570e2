import numpy as np
import pytest

from fedreplay.core import ValidationError
from fedreplay.scenarios import (
    TASK_UID_STRIDE,
    ClientPartition,
    TaskSpec,
    TaskStream,
    _lattice_means,
    build_experiment_data,
    build_task_stream,
    dirichlet_partition,
    domain_shift_vector,
    make_gaussian_dataset,
)


class TestGaussianDataset:
    def test_sample_counts(self):
        ds = make_gaussian_dataset(num_classes=2, per_class=10, feature_dim=4, seed=1)
        assert len(ds) == 20
        hist = ds.class_histogram()
        assert hist.get(0) == 10 and hist.get(1) == 10

    def test_same_seed_bitwise_identical(self):
        a = make_gaussian_dataset(3, 5, 4, seed=42)
        b = make_gaussian_dataset(3, 5, 4, seed=42)
        assert np.array_equal(a.feature_matrix, b.feature_matrix)
        assert a.label_vector.tolist() == b.label_vector.tolist()

    def test_different_seed_differs(self):
        a = make_gaussian_dataset(3, 5, 4, seed=1)
        b = make_gaussian_dataset(3, 5, 4, seed=2)
        assert not np.array_equal(a.feature_matrix, b.feature_matrix)

    def test_domain_shift_moves_empirical_means(self):
        per_class = 1000
        shift = np.full(6, 0.7)
        plain = make_gaussian_dataset(2, per_class, 6, domain_shift=None, seed=5)
        shifted = make_gaussian_dataset(2, per_class, 6, domain_shift=shift, seed=5)
        bound = 3.0 / np.sqrt(per_class)  # 3 sigma / sqrt(n) with unit covariance
        for label in (0, 1):
            sel = plain.label_vector == label
            diff = shifted.feature_matrix[sel].mean(axis=0) - plain.feature_matrix[sel].mean(axis=0)
            assert np.all(np.abs(diff - shift) < bound)

    def test_degenerate_arguments_rejected(self):
        with pytest.raises(ValidationError):
            make_gaussian_dataset(1, 10, 4)
        with pytest.raises(ValidationError):
            make_gaussian_dataset(2, 0, 4)
        with pytest.raises(ValidationError):
            make_gaussian_dataset(2, 10, 1)
        with pytest.raises(ValidationError):
            make_gaussian_dataset(2, 10, 4, domain_shift=np.zeros(3))

    def test_lattice_means_distinct(self):
        means = _lattice_means(13, 16)
        dists = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
        np.fill_diagonal(dists, np.inf)
        assert dists.min() >= 4.0 - 1e-12

    def test_domain_shift_vector_norm(self):
        assert domain_shift_vector(0, 8) is None
        for d in (1, 2, 3):
            vec = domain_shift_vector(d, 8)
            assert abs(np.linalg.norm(vec) - 2.0 * d) < 1e-12


class TestDirichletPartition:
    def test_single_client_gets_everything(self):
        ds = make_gaussian_dataset(3, 8, 4, seed=0)
        parts = dirichlet_partition(ds, num_clients=1, alpha=0.5, seed=0)
        assert parts[0].uids() == ds.uids()

    def test_per_class_counts_conserved(self):
        ds = make_gaussian_dataset(4, 25, 4, seed=3)
        for alpha in (0.1, 1.0, 100.0):
            parts = dirichlet_partition(ds, num_clients=5, alpha=alpha, seed=7)
            for label in range(4):
                total = sum(
                    int((p.label_vector == label).sum()) for p in parts.values()
                )
                assert total == 25
            union = set()
            for p in parts.values():
                union |= p.uids()
            assert union == ds.uids()

    def test_smaller_alpha_concentrates_classes(self):
        ds = make_gaussian_dataset(4, 30, 4, seed=1)

        def mean_max_share(alpha):
            shares = []
            for seed in range(50):
                parts = dirichlet_partition(ds, 5, alpha, seed=seed)
                for label in range(4):
                    counts = [int((p.label_vector == label).sum()) for p in parts.values()]
                    shares.append(max(counts) / 30)
            return np.mean(shares)

        assert mean_max_share(0.1) > mean_max_share(100.0)

    def test_deterministic_in_seed(self):
        ds = make_gaussian_dataset(3, 20, 4, seed=2)
        a = dirichlet_partition(ds, 4, 0.3, seed=9)
        b = dirichlet_partition(ds, 4, 0.3, seed=9)
        for c in range(4):
            assert a[c].uids() == b[c].uids()

    def test_no_client_left_empty(self):
        ds = make_gaussian_dataset(2, 6, 4, seed=4)
        for seed in range(30):
            parts = dirichlet_partition(ds, num_clients=4, alpha=0.05, seed=seed)
            assert all(len(p) >= 1 for p in parts.values()), f"seed {seed} left a client empty"

    def test_invalid_arguments(self):
        ds = make_gaussian_dataset(2, 4, 4, seed=0)
        with pytest.raises(ValidationError):
            dirichlet_partition(ds, 2, alpha=0.0)
        with pytest.raises(ValidationError):
            dirichlet_partition(ds, 0, alpha=1.0)


class TestTaskStream:
    def test_fcil_class_blocks(self):
        stream = build_task_stream("FCIL", [4, 3, 3, 3])
        assert len(stream.tasks) == 4
        assert stream.tasks[0].class_set == (0, 1, 2, 3)
        assert stream.tasks[1].class_set == (4, 5, 6)
        assert stream.tasks[2].class_set == (7, 8, 9)
        assert stream.tasks[3].class_set == (10, 11, 12)
        assert stream.num_classes == 13
        assert all(t.domain_id == 0 for t in stream.tasks)

    def test_fdil_same_classes_distinct_domains(self):
        stream = build_task_stream("FDIL", [13], num_domains=3)
        assert len(stream.tasks) == 3
        universe = tuple(range(13))
        assert all(t.class_set == universe for t in stream.tasks)
        assert [t.domain_id for t in stream.tasks] == [0, 1, 2]

    def test_fcdil_single_task_degenerates_to_plain_fl(self):
        stream = build_task_stream("FCDIL", [5], num_domains=1)
        assert len(stream.tasks) == 1
        assert stream.tasks[0].domain_id == 0

    def test_fcdil_adds_classes_and_advances_domain(self):
        stream = build_task_stream("FCDIL", [3, 3, 3, 3], num_domains=2)
        assert [t.domain_id for t in stream.tasks] == [0, 0, 1, 1]
        seen = set()
        for t in stream.tasks:
            assert not seen.intersection(t.class_set)
            seen.update(t.class_set)

    def test_inconsistent_scenario_arguments_rejected(self):
        with pytest.raises(ValidationError):
            build_task_stream("FCIL", [4, 3], num_domains=2)
        with pytest.raises(ValidationError):
            build_task_stream("FDIL", [4, 3], num_domains=2)
        with pytest.raises(ValidationError):
            build_task_stream("NOPE", [4])

    def test_stream_invariants_enforced(self):
        with pytest.raises(ValidationError):
            TaskStream(
                (
                    TaskSpec(0, (0, 1), domain_id=0),
                    TaskSpec(1, (1, 2), domain_id=0),
                ),
                "FCIL",
            )
        with pytest.raises(ValidationError):
            TaskStream(
                (
                    TaskSpec(0, (0, 1), domain_id=0),
                    TaskSpec(1, (0, 1), domain_id=0),
                ),
                "FDIL",
            )


class TestExperimentData:
    def build(self, seed=0):
        stream = build_task_stream("FCIL", [3, 2])
        return stream, build_experiment_data(
            stream, num_clients=3, per_class=20, feature_dim=4, alpha=0.5, seed=seed
        )

    def test_partition_completeness(self):
        stream, data = self.build()
        for task in stream.tasks:
            t = task.task_index
            union = set()
            for c in data.partition.clients():
                union |= data.partition.dataset_for(t, c).uids()
            assert union == data.train_sets[t].uids()

    def test_test_split_fraction_and_disjointness(self):
        stream, data = self.build()
        for task in stream.tasks:
            t = task.task_index
            test, train = data.test_sets[t], data.train_sets[t]
            per_class_total = 20
            hist = test.class_histogram()
            for y in task.class_set:
                assert hist.get(y) == round(0.2 * per_class_total)
            assert not test.uids() & train.uids()

    def test_labels_restricted_to_task_classes(self):
        stream, data = self.build()
        for task in stream.tasks:
            for c in data.partition.clients():
                labels = set(data.partition.dataset_for(task.task_index, c).label_vector.tolist())
                assert labels <= set(task.class_set)

    def test_uid_stride_identifies_task(self):
        stream, data = self.build()
        for task in stream.tasks:
            for uid in data.train_sets[task.task_index].uids():
                assert uid // TASK_UID_STRIDE == task.task_index

    def test_fully_deterministic(self):
        _, a = self.build(seed=5)
        _, b = self.build(seed=5)
        for key in a.partition.by_task_client:
            da, db = a.partition.by_task_client[key], b.partition.by_task_client[key]
            assert np.array_equal(da.feature_matrix, db.feature_matrix)
            assert da.uids() == db.uids()

    def test_duplicate_uid_across_clients_rejected(self):
        ds = make_gaussian_dataset(2, 4, 4, seed=0)
        with pytest.raises(ValidationError):
            ClientPartition({(0, 0): ds, (0, 1): ds})
