import numpy as np
import pytest

from hsipeft.metrics import (MetricsError, aa, confusion_matrix, format_report,
                             kappa, key_value_dump, oa)

EXAMPLE = np.array([[40, 10], [20, 30]])


class TestOa:
    def test_diagonal_is_perfect(self):
        assert oa(np.diag([5, 9, 2])) == 1.0

    def test_example_matrix(self):
        assert oa(EXAMPLE) == pytest.approx(0.70)

    def test_all_off_diagonal(self):
        assert oa(np.array([[0, 7], [3, 0]])) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(MetricsError):
            oa(np.zeros((2, 2), dtype=np.int64))


class TestAa:
    def test_diagonal(self):
        assert aa(np.diag([1, 2, 3])) == 1.0

    def test_example_matrix(self):
        assert aa(EXAMPLE) == pytest.approx(0.70)

    def test_imbalance_differs_from_oa(self):
        cm = np.array([[1, 0], [99, 1]])
        assert aa(cm) == pytest.approx(0.505)
        assert oa(cm) != aa(cm)

    def test_empty_row_rejected(self):
        with pytest.raises(MetricsError, match="class 2"):
            aa(np.array([[3, 0], [0, 0]]))


class TestKappa:
    def test_perfect(self):
        assert kappa(np.diag([4, 4])) == pytest.approx(1.0)

    def test_example_matrix(self):
        assert kappa(EXAMPLE) == pytest.approx(0.40)

    def test_independent_predictions_near_zero(self):
        rng = np.random.default_rng(0)
        n = 10 ** 5
        true = rng.integers(1, 5, size=n)
        pred = rng.integers(1, 5, size=n)
        cm = confusion_matrix(true, pred, 4)
        assert abs(kappa(cm)) <= 0.02

    def test_single_cell_degenerate(self):
        with pytest.raises(MetricsError):
            kappa(np.array([[10]]))

    def test_kappa_strictly_below_oa(self):
        assert kappa(EXAMPLE) < oa(EXAMPLE)


class TestConfusionMatrix:
    def test_counts_and_total(self, rng):
        true = np.array([1, 1, 2, 2, 2])
        pred = np.array([1, 2, 2, 2, 1])
        cm = confusion_matrix(true, pred, 2)
        assert np.array_equal(cm, [[1, 1], [1, 2]])
        assert cm.sum() == 5

    def test_label_zero_excluded(self):
        true = np.array([0, 1, 0, 2])
        pred = np.array([1, 1, 2, 2])
        cm = confusion_matrix(true, pred, 2)
        assert cm.sum() == 2
        assert np.array_equal(cm, np.diag([1, 1]))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            confusion_matrix(np.array([3]), np.array([1]), 2)


class TestProperties:
    def test_permutation_invariance(self, rng):
        cm = rng.integers(1, 30, size=(5, 5))
        perm = rng.permutation(5)
        permuted = cm[np.ix_(perm, perm)]
        assert oa(permuted) == pytest.approx(oa(cm))
        assert aa(permuted) == pytest.approx(aa(cm))
        assert kappa(permuted) == pytest.approx(kappa(cm))

    def test_aa_equals_oa_for_balanced_recall(self):
        cm = np.array([[8, 2], [2, 8]])
        assert aa(cm) == pytest.approx(oa(cm))


class TestReport:
    def test_key_value_dump_fields(self):
        lines = key_value_dump(EXAMPLE)
        assert lines[0] == f"oa={0.7!r}"
        assert any(line.startswith("kappa=") for line in lines)
        assert any(line.startswith("per_class_2=") for line in lines)

    def test_report_formats_percentages(self):
        text = format_report(EXAMPLE, title="toy")
        assert "OA:    70.00 %" in text
        assert "Kappa: 40.00 %" in text
        assert "oa=" in text
