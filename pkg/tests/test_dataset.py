import numpy as np
import pytest

from symcdm.dataset import (
    QMatrix,
    ResponseDataset,
    SyntheticGroundTruth,
    generate_synthetic,
    generating_probabilities,
    load_logs,
    load_qmatrix,
    save_logs,
    save_qmatrix,
    split,
)
from symcdm.errors import DataError


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadQMatrix:
    def test_identity(self, tmp_path):
        q = load_qmatrix(write(tmp_path, "q.csv", "1,0\n0,1\n"))
        assert q.n_exercises == 2 and q.n_attributes == 2
        assert np.array_equal(q.entries, np.eye(2, dtype=int))

    def test_all_zero_row_rejected(self, tmp_path):
        with pytest.raises(DataError, match="no attributes"):
            load_qmatrix(write(tmp_path, "q.csv", "1,1\n0,0\n"))

    def test_non_binary_rejected_with_line(self, tmp_path):
        with pytest.raises(DataError, match="q.csv:2"):
            load_qmatrix(write(tmp_path, "q.csv", "1,0\n2,1\n"))

    def test_ragged_rejected(self, tmp_path):
        with pytest.raises(DataError, match="ragged"):
            load_qmatrix(write(tmp_path, "q.csv", "1,0\n1\n"))

    def test_crlf_accepted(self, tmp_path):
        q = load_qmatrix(write(tmp_path, "q.csv", "1,0\r\n0,1\r\n"))
        assert q.n_exercises == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_qmatrix(tmp_path / "nope.csv")


class TestLoadLogs:
    def q1(self):
        return QMatrix([[1]])

    def test_minimal(self, tmp_path):
        ds = load_logs(write(tmp_path, "l.csv", "0,0,1\n"), 1, self.q1())
        assert ds.n_logs == 1 and ds.logs == [(0, 0, 1)]

    def test_duplicate_pair_rejected(self, tmp_path):
        with pytest.raises(DataError, match="duplicate"):
            load_logs(write(tmp_path, "l.csv", "0,0,1\n0,0,1\n"), 1, self.q1())

    def test_malformed_row_reports_line(self, tmp_path):
        with pytest.raises(DataError, match="l.csv:2"):
            load_logs(write(tmp_path, "l.csv", "0,0,1\n0,zero,1\n"), 1, self.q1())

    def test_index_out_of_range(self, tmp_path):
        with pytest.raises(DataError, match="student index 3"):
            load_logs(write(tmp_path, "l.csv", "3,0,1\n"), 2, self.q1())
        with pytest.raises(DataError, match="exercise index 5"):
            load_logs(write(tmp_path, "l.csv", "0,5,1\n"), 2, self.q1())

    def test_bad_score(self, tmp_path):
        with pytest.raises(DataError, match="score 7"):
            load_logs(write(tmp_path, "l.csv", "0,0,7\n"), 1, self.q1())

    def test_round_trip_with_save(self, tmp_path):
        ds, _ = generate_synthetic(20, 5, 3, density=0.7, seed=3)
        save_logs(ds, tmp_path / "l.csv")
        save_qmatrix(ds.qmatrix, tmp_path / "q.csv")
        q2 = load_qmatrix(tmp_path / "q.csv")
        ds2 = load_logs(tmp_path / "l.csv", 20, q2)
        assert ds2.logs == ds.logs
        assert q2 == ds.qmatrix


class TestDatasetInvariants:
    def test_empty_logs_rejected_by_default(self):
        with pytest.raises(DataError, match="no logs"):
            ResponseDataset([], 1, QMatrix([[1]]))

    def test_duplicate_detected_in_constructor(self):
        with pytest.raises(DataError, match="duplicate"):
            ResponseDataset([(0, 0, 1), (0, 0, 0)], 1, QMatrix([[1]]))

    def test_immutable_arrays(self, tiny_dataset):
        with pytest.raises(ValueError):
            tiny_dataset.scores[0] = 1 - tiny_dataset.scores[0]


class TestSplit:
    def test_floor_rule_8_2(self):
        q = QMatrix(np.ones((10, 2), dtype=int))
        logs = [(0, e, 1) for e in range(10)]
        ds = ResponseDataset(logs, 1, q)
        train, test = split(ds, 0.2, seed=0)
        assert train.n_logs == 8 and test.n_logs == 2

    def test_single_log_student_stays_in_train(self):
        q = QMatrix([[1]])
        ds = ResponseDataset([(0, 0, 1)], 1, q)
        train, test = split(ds, 0.2, seed=0)
        assert train.n_logs == 1 and test.n_logs == 0

    def test_deterministic_and_disjoint(self, small_synthetic):
        ds, _ = small_synthetic
        t1a, t1b = split(ds, 0.2, seed=5)
        t2a, t2b = split(ds, 0.2, seed=5)
        assert t1a.logs == t2a.logs and t1b.logs == t2b.logs
        merged = sorted(t1a.logs + t1b.logs)
        assert merged == sorted(ds.logs)

    def test_different_seed_changes_split(self, small_synthetic):
        ds, _ = small_synthetic
        _, test_a = split(ds, 0.2, seed=1)
        _, test_b = split(ds, 0.2, seed=2)
        assert test_a.logs != test_b.logs

    def test_every_student_kept_in_train(self, small_synthetic):
        ds, _ = small_synthetic
        train, _ = split(ds, 0.5, seed=9)
        assert set(np.unique(train.students)) == set(np.unique(ds.students))

    def test_fraction_bounds(self, tiny_dataset):
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                split(tiny_dataset, bad, seed=0)


class TestGenerateSynthetic:
    def test_deterministic(self):
        a, truth_a = generate_synthetic(30, 6, 4, density=0.5, seed=42)
        b, truth_b = generate_synthetic(30, 6, 4, density=0.5, seed=42)
        assert a.logs == b.logs
        assert np.array_equal(a.qmatrix.entries, b.qmatrix.entries)
        assert np.array_equal(truth_a.true_p, truth_b.true_p)
        assert truth_a.bayes_accuracy == truth_b.bayes_accuracy

    def test_probabilities_hand_check(self):
        # With P = 1, diff = 0, disc = 2, an exercise touching k attributes
        # generates sigmoid(2k).
        q = QMatrix([[1, 0, 0], [1, 1, 0], [1, 1, 1]])
        truth = SyntheticGroundTruth(
            true_p=np.ones((2, 3)),
            true_diff=np.zeros((3, 3)),
            true_disc=np.full(3, 2.0),
            bayes_accuracy=0.0,
        )
        probs = generating_probabilities(
            truth, q, students=np.array([0, 0, 0]), exercises=np.array([0, 1, 2])
        )
        expected = 1.0 / (1.0 + np.exp(-2.0 * np.array([1, 2, 3])))
        assert np.allclose(probs, expected, rtol=0, atol=1e-15)

    def test_single_attr_full_density(self):
        ds, _ = generate_synthetic(5, 4, 1, density=1.0, seed=0)
        assert np.array_equal(ds.qmatrix.entries, np.ones((4, 1), dtype=int))

    def test_disc_range(self):
        _, truth = generate_synthetic(50, 30, 5, density=0.5, seed=8)
        assert truth.true_disc.min() >= 0.5 and truth.true_disc.max() <= 2.5

    def test_logs_per_student_cap(self):
        ds, _ = generate_synthetic(10, 6, 3, density=0.5, seed=1, logs_per_student=4)
        counts = np.bincount(ds.students, minlength=10)
        assert (counts == 4).all()

    def test_empirical_rate_matches_generator(self):
        # >= 1e5 logs: empirical correct rate within 0.01 of the mean
        # generating probability.
        ds, truth = generate_synthetic(5000, 20, 6, density=0.4, seed=13)
        assert ds.n_logs == 100_000
        probs = generating_probabilities(truth, ds.qmatrix, ds.students, ds.exercises)
        assert abs(ds.correct_rate() - probs.mean()) < 0.01

    def test_bayes_accuracy_definition(self):
        ds, truth = generate_synthetic(40, 10, 4, density=0.5, seed=2)
        probs = generating_probabilities(truth, ds.qmatrix, ds.students, ds.exercises)
        assert truth.bayes_accuracy == pytest.approx(
            float(np.maximum(probs, 1 - probs).mean())
        )
