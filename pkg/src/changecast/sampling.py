"""Change-weighted patch sampling.

Patch i is drawn with probability (a + N_i) / sum_k (a + N_k), where N_i is
its number of changed pixels and `a` smooths the distribution toward uniform.
"""
from __future__ import annotations

import numpy as np

DEFAULT_SMOOTHING = 50.0


def sample_probabilities(n_change_counts, a: float = DEFAULT_SMOOTHING) -> np.ndarray:
    counts = np.asarray(n_change_counts, dtype=np.float64)
    if a < 0:
        raise ValueError("smoothing constant a must be >= 0")
    if counts.ndim != 1 or len(counts) == 0:
        raise ValueError("need a non-empty 1-d list of counts")
    if (counts < 0).any():
        raise ValueError("change counts must be >= 0")
    weights = a + counts
    total = weights.sum()
    if total <= 0:
        raise ValueError("all sampling weights are zero (a = 0 and no changed pixels)")
    return weights / total


class ChangeSampler:
    """Draws patch indices with replacement from the change-weighted distribution.

    The draw sequence depends only on the seed and the number of draws made.
    """

    def __init__(self, n_change_counts, a: float = DEFAULT_SMOOTHING, seed: int = 0):
        if len(n_change_counts) == 0:
            raise ValueError("cannot sample from an empty dataset")
        self.a = float(a)
        self.seed = int(seed)
        self.probabilities = sample_probabilities(n_change_counts, a)
        self.weights = self.a + np.asarray(n_change_counts, dtype=np.float64)
        self.rng = np.random.default_rng(seed)
        self.n_drawn = 0

    def __len__(self):
        return len(self.probabilities)

    def draw_batch(self, batch_size: int) -> np.ndarray:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.n_drawn += batch_size
        return self.rng.choice(len(self.probabilities), size=batch_size, replace=True, p=self.probabilities)

    def epoch(self, batch_size: int):
        """Batches covering one dataset-size worth of draws."""
        n = len(self)
        for start in range(0, n, batch_size):
            yield self.draw_batch(min(batch_size, n - start))


def draw_batch(state: ChangeSampler, batch_size: int) -> np.ndarray:
    return state.draw_batch(batch_size)
