import time

import numpy as np
import pytest

from changecast.sampling import DEFAULT_SMOOTHING, ChangeSampler, draw_batch, sample_probabilities


def test_worked_example():
    p = sample_probabilities([0, 50, 150], a=50)
    np.testing.assert_allclose(p, [1 / 7, 2 / 7, 4 / 7], rtol=0, atol=1e-15)


def test_default_smoothing():
    assert DEFAULT_SMOOTHING == 50
    np.testing.assert_allclose(sample_probabilities([0, 50, 150]), [1 / 7, 2 / 7, 4 / 7])


def test_sums_to_one_and_positive():
    rng = np.random.default_rng(0)
    for _ in range(50):
        counts = rng.integers(0, 50_000, size=rng.integers(1, 500))
        p = sample_probabilities(counts)
        assert abs(p.sum() - 1.0) < 1e-12
        assert (p > 0).all()


def test_monotone_in_change_count():
    rng = np.random.default_rng(1)
    counts = rng.integers(0, 1000, size=200)
    p = sample_probabilities(counts)
    order = np.argsort(counts, kind="stable")
    assert (np.diff(p[order]) >= 0).all()


def test_huge_smoothing_is_uniform():
    p = sample_probabilities([0, 10, 5000, 20], a=1e9)
    np.testing.assert_allclose(p, 0.25, atol=1e-6)


def test_zero_smoothing_never_draws_empty_patches():
    s = ChangeSampler([0, 3, 0, 1], a=0, seed=0)
    drawn = s.draw_batch(1000)
    assert set(drawn.tolist()) <= {1, 3}


def test_monte_carlo_frequencies():
    t0 = time.perf_counter()
    s = ChangeSampler([0, 50, 150], a=50, seed=123)
    draws = s.draw_batch(100_000)
    freq = np.bincount(draws, minlength=3) / draws.size
    assert time.perf_counter() - t0 < 5.0
    np.testing.assert_allclose(freq, [1 / 7, 2 / 7, 4 / 7], atol=0.01)


def test_deterministic_under_seed():
    a = ChangeSampler([3, 1, 4, 1, 5], seed=9)
    b = ChangeSampler([3, 1, 4, 1, 5], seed=9)
    seq_a = [a.draw_batch(16) for _ in range(5)]
    seq_b = [draw_batch(b, 16) for _ in range(5)]
    for x, y in zip(seq_a, seq_b):
        np.testing.assert_array_equal(x, y)
    c = ChangeSampler([3, 1, 4, 1, 5], seed=10)
    assert any(not np.array_equal(x, c.draw_batch(16)) for x in seq_a)


def test_single_sample_dataset():
    s = ChangeSampler([0], seed=0)
    np.testing.assert_array_equal(s.draw_batch(4), [0, 0, 0, 0])


def test_with_replacement():
    s = ChangeSampler([5, 5], seed=0)
    assert len(s.draw_batch(16)) == 16


@pytest.mark.parametrize("counts,a", [([], 50), ([1, -1], 50), ([0, 0], 0), ([1, 2], -1.0)])
def test_invalid_inputs(counts, a):
    with pytest.raises(ValueError):
        sample_probabilities(counts, a)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        ChangeSampler([])
    with pytest.raises(ValueError):
        ChangeSampler([1]).draw_batch(0)
