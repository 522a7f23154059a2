import numpy as np
import pytest

from streamasr.metrics import MetricsReport, cer, edit_distance, wer


def edit_distance_oracle(a, b):
    """Independent full-matrix DP."""
    a, b = list(a), list(b)
    n, m = len(a), len(b)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(
                d[i - 1][j] + 1,
                d[i][j - 1] + 1,
                d[i - 1][j - 1] + (0 if a[i - 1] == b[j - 1] else 1),
            )
    return d[n][m]


class TestEditDistance:
    def test_identical(self):
        assert edit_distance("cat", "cat") == 0

    def test_single_insertion(self):
        assert edit_distance("cat", "cart") == 1

    def test_empty_cases(self):
        assert edit_distance("", "abc") == 3
        assert edit_distance("abc", "") == 3
        assert edit_distance("", "") == 0

    def test_matches_dp_oracle_on_random_pairs(self):
        rng = np.random.default_rng(0)
        letters = list("abcd")
        for _ in range(200):
            a = "".join(rng.choice(letters, size=rng.integers(0, 9)))
            b = "".join(rng.choice(letters, size=rng.integers(0, 9)))
            assert edit_distance(a, b) == edit_distance_oracle(a, b)

    def test_metric_axioms(self):
        rng = np.random.default_rng(1)
        letters = list("ab")
        for _ in range(60):
            strs = ["".join(rng.choice(letters, size=rng.integers(0, 7))) for _ in range(3)]
            x, y, z = strs
            assert edit_distance(x, y) == edit_distance(y, x)
            assert (edit_distance(x, y) == 0) == (x == y)
            assert edit_distance(x, z) <= edit_distance(x, y) + edit_distance(y, z)


class TestRates:
    def test_wer_one_third(self):
        assert wer("the cat sat", "the hat sat") == pytest.approx(1 / 3)

    def test_identical_zero(self):
        assert cer("hello", "hello") == 0.0
        assert wer("hello world", "hello world") == 0.0

    def test_empty_hypothesis_all_deletions(self):
        assert wer("a b c", "") == pytest.approx(1.0)
        assert cer("abc", "") == pytest.approx(1.0)

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError, match="undefined rate"):
            cer("", "abc")
        with pytest.raises(ValueError, match="undefined rate"):
            wer("   ", "abc")

    def test_report_aggregation(self):
        report = MetricsReport.from_pairs([("ab", "ab"), ("cd", "ce")])
        assert report.cer == pytest.approx(0.25)
        assert report.utterances == 2
