import numpy as np
import pytest

from svp_tta.errors import ContractViolation
from svp_tta.stats import (
    ClassStats,
    batch_moments,
    beta_schedule,
    merge_stats,
    stats_from_dict,
    stats_to_dict,
)


def pooled_oracle(features, labels, num_classes):
    """Single-pass gather-then-compute per-class moments."""
    means = np.zeros((num_classes, features.shape[1]))
    covs = np.zeros((num_classes, features.shape[1], features.shape[1]))
    counts = np.zeros(num_classes, dtype=np.int64)
    for j in range(num_classes):
        rows = features[labels == j]
        if len(rows) == 0:
            continue
        counts[j] = len(rows)
        means[j] = rows.mean(axis=0)
        centered = rows - means[j]
        covs[j] = centered.T @ centered / len(rows)
    return means, covs, counts


class TestBatchMoments:
    def test_single_sample(self):
        x = np.array([[1.0, 2.0, 3.0]])
        bm = batch_moments(x, np.array([2]), 4)
        assert np.array_equal(bm.means[2], x[0])
        assert np.abs(bm.covs[2]).max() == 0.0
        assert bm.counts[2] == 1
        assert bm.counts.sum() == 1

    def test_two_point_closed_form(self):
        x = np.array([1.0, 3.0])
        y = np.array([5.0, -1.0])
        bm = batch_moments(np.stack([x, y]), np.array([0, 0]), 1)
        mu = (x + y) / 2
        expected = (np.outer(x - mu, x - mu) + np.outer(y - mu, y - mu)) / 2
        assert np.allclose(bm.means[0], mu, atol=1e-15)
        assert np.allclose(bm.covs[0], expected, atol=1e-15)

    def test_matches_gather_oracle(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((50, 4))
        y = rng.integers(0, 3, 50)
        bm = batch_moments(f, y, 3)
        means, covs, counts = pooled_oracle(f, y, 3)
        assert np.abs(bm.means - means).max() <= 1e-12
        assert np.abs(bm.covs - covs).max() <= 1e-12
        assert np.array_equal(bm.counts, counts)

    def test_absent_class_zero(self):
        bm = batch_moments(np.ones((3, 2)), np.array([0, 0, 0]), 2)
        assert bm.counts[1] == 0
        assert np.abs(bm.means[1]).max() == 0.0


class TestMergeStats:
    def test_virgin_merge_exact(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((20, 3))
        y = rng.integers(0, 4, 20)
        bm = batch_moments(f, y, 4)
        merged = merge_stats(ClassStats.empty(4, 3), bm)
        assert np.array_equal(merged.means, bm.means)
        assert np.array_equal(merged.covs, bm.covs)
        assert np.array_equal(merged.counts, bm.counts)

    def test_empty_batch_no_change(self):
        rng = np.random.default_rng(2)
        stats = merge_stats(
            ClassStats.empty(3, 2),
            batch_moments(rng.standard_normal((9, 2)), rng.integers(0, 3, 9), 3),
        )
        empty = batch_moments(np.zeros((1, 2)), np.array([0]), 3)
        empty.counts[0] = 0  # force an all-absent batch
        empty.means[0] = 0.0
        empty.covs[0] = 0.0
        after = merge_stats(stats, empty)
        assert np.array_equal(after.means, stats.means)
        assert np.array_equal(after.covs, stats.covs)
        assert np.array_equal(after.counts, stats.counts)

    def test_streaming_equals_pooled(self):
        rng = np.random.default_rng(3)
        f = rng.standard_normal((200, 4))
        y = rng.integers(0, 5, 200)
        stats = ClassStats.empty(5, 4)
        for start in range(0, 200, 20):
            stats = merge_stats(
                stats, batch_moments(f[start:start + 20], y[start:start + 20], 5))
        means, covs, counts = pooled_oracle(f, y, 5)
        assert np.abs(stats.means - means).max() <= 1e-9
        assert np.abs(stats.covs - covs).max() <= 1e-9
        assert np.array_equal(stats.counts, counts)

    def test_partition_order_robustness(self):
        rng = np.random.default_rng(4)
        f = rng.standard_normal((120, 3))
        y = rng.integers(0, 4, 120)
        # two different partitions, one of them order-permuted
        plans = [
            [(0, 40), (40, 80), (80, 120)],
            [(80, 120), (0, 13), (13, 40), (40, 80)],
        ]
        results = []
        for plan in plans:
            stats = ClassStats.empty(4, 3)
            for lo, hi in plan:
                stats = merge_stats(stats, batch_moments(f[lo:hi], y[lo:hi], 4))
            results.append(stats)
        a, b = results
        assert np.abs(a.means - b.means).max() <= 1e-9
        assert np.abs(a.covs - b.covs).max() <= 1e-9
        assert np.array_equal(a.counts, b.counts)

    def test_counts_exactly_conserved(self):
        rng = np.random.default_rng(5)
        stats = ClassStats.empty(6, 2)
        total = 0
        for _ in range(10):
            k = int(rng.integers(1, 30))
            stats = merge_stats(
                stats,
                batch_moments(rng.standard_normal((k, 2)), rng.integers(0, 6, k), 6),
            )
            total += k
        assert stats.counts.sum() == total

    def test_covariances_psd_up_to_noise(self):
        rng = np.random.default_rng(6)
        stats = ClassStats.empty(3, 5)
        for _ in range(8):
            stats = merge_stats(
                stats,
                batch_moments(rng.standard_normal((25, 5)), rng.integers(0, 3, 25), 3),
            )
        for j in range(3):
            eigs = np.linalg.eigvalsh(stats.covs[j])
            assert eigs.min() >= -1e-9 * np.trace(stats.covs[j])

    def test_symmetry_invariant(self):
        rng = np.random.default_rng(7)
        stats = ClassStats.empty(2, 4)
        for _ in range(5):
            stats = merge_stats(
                stats,
                batch_moments(rng.standard_normal((15, 4)), rng.integers(0, 2, 15), 2),
            )
        for j in range(2):
            assert np.abs(stats.covs[j] - stats.covs[j].T).max() <= 1e-9


class TestBetaSchedule:
    def test_full_at_total(self):
        assert beta_schedule(40, 40, 0.5) == 0.5

    def test_linear_midpoint(self):
        assert beta_schedule(20, 40, 0.5) == pytest.approx(0.25)

    def test_unknown_total_warmup_clamp(self):
        assert beta_schedule(80, None, 0.5, warmup=50) == 0.5
        assert beta_schedule(25, None, 0.5, warmup=50) == pytest.approx(0.25)

    def test_clamped_beyond_total(self):
        assert beta_schedule(60, 40, 0.5) == 0.5

    def test_contracts(self):
        with pytest.raises(ContractViolation):
            beta_schedule(0, 10, 0.5)
        with pytest.raises(ContractViolation):
            beta_schedule(1, 10, -0.1)
        with pytest.raises(ContractViolation):
            beta_schedule(1, None, 0.5, warmup=0)


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(8)
        stats = ClassStats.empty(3, 4)
        stats = merge_stats(
            stats,
            batch_moments(rng.standard_normal((40, 4)), rng.integers(0, 3, 40), 3),
        )
        back = stats_from_dict(stats_to_dict(stats))
        assert np.array_equal(back.means, stats.means)
        assert np.array_equal(back.covs, stats.covs)
        assert np.array_equal(back.counts, stats.counts)

    def test_malformed_payload(self):
        with pytest.raises(ContractViolation):
            stats_from_dict({"num_classes": 2})
        good = stats_to_dict(ClassStats.empty(2, 3))
        good["covs"] = [[[0.0]]]
        with pytest.raises(ContractViolation):
            stats_from_dict(good)
