import json

import numpy as np
import pytest

from changecast.thresholding import ThresholdTracker, apply_threshold, batch_optimal_threshold, f1_sweep, update


def f1_at(scores, labels, t):
    pred = scores > t
    tp = np.sum(pred & labels)
    denom = pred.sum() + labels.sum()
    return 2 * tp / denom if denom else 0.0


def test_worked_example():
    assert batch_optimal_threshold([0.1, 0.4, 0.8], [0, 0, 1]) == pytest.approx(0.6)


def test_no_positives_returns_none():
    assert batch_optimal_threshold([0.1, 0.4, 0.8], [0, 0, 0]) is None


def test_all_positives_predicts_everything():
    t = batch_optimal_threshold([0.2, 0.5, 0.9], [1, 1, 1])
    assert t == 0.0
    assert apply_threshold([0.2, 0.5, 0.9], t).all()


def test_ties_prefer_larger_threshold():
    # predicting {0.3, 0.7} or only {0.7} both give F1 = 2/3 here
    t = batch_optimal_threshold([0.3, 0.7, 0.7], [0, 1, 0])
    assert t == pytest.approx(0.5)


def test_sweep_beats_dense_grid():
    rng = np.random.default_rng(0)
    grid = np.linspace(0, 1, 10_001)
    for _ in range(100):
        n = rng.integers(2, 400)
        labels = rng.random(n) < rng.uniform(0.05, 0.6)
        if not labels.any():
            labels[0] = True
        scores = np.clip(rng.normal(0.5 + 0.2 * labels, 0.2), 0, 1).round(rng.integers(2, 6))
        t = batch_optimal_threshold(scores, labels)
        best_sweep = f1_at(scores, labels, t)
        pred = scores[None, :] > grid[:, None]
        best_grid = np.max(2 * (pred & labels).sum(1) / (pred.sum(1) + labels.sum()))
        assert best_grid <= best_sweep + 1e-12


def test_sweep_values_match_direct():
    rng = np.random.default_rng(1)
    scores, labels = rng.random(300), rng.random(300) < 0.3
    ts, f1 = f1_sweep(scores, labels)
    for t, f in zip(ts[::7], f1[::7]):
        assert f == pytest.approx(f1_at(scores, labels, t), abs=1e-12)


def test_subsampling_keeps_threshold_close():
    rng = np.random.default_rng(2)
    labels = rng.random(400_000) < 0.02
    scores = np.clip(rng.normal(0.3 + 0.4 * labels, 0.15), 0, 1)
    full = batch_optimal_threshold(scores, labels, max_pixels=10**7)
    sub = batch_optimal_threshold(scores, labels, rng=np.random.default_rng(0))
    assert abs(full - sub) < 0.05


def test_length_mismatch():
    with pytest.raises(ValueError):
        batch_optimal_threshold([0.1, 0.2], [1])


# ---------------------------------------------------------------- tracker

def test_tracker_defaults():
    assert ThresholdTracker().current == 0.5
    assert ThresholdTracker(default=0.33).current == 0.33
    assert ThresholdTracker().window == 500


def test_tracker_matches_brute_force_window():
    rng = np.random.default_rng(3)
    tr = ThresholdTracker(window=500)
    pushed = []
    for i in range(600):
        v = float(rng.random())
        update(tr, v)
        pushed.append(v)
        assert tr.current == pytest.approx(np.mean(pushed[-500:]), abs=1e-12)
    assert len(tr.values) == 500


def test_tracker_skips_none():
    tr = ThresholdTracker(window=3)
    tr.update(0.2).update(None).update(0.4)
    assert tr.snapshot() == (pytest.approx(0.3), 2)


def test_tracker_rejects_out_of_range():
    with pytest.raises(ValueError):
        ThresholdTracker().update(1.5)
    with pytest.raises(ValueError):
        ThresholdTracker(window=0)


def test_tracker_json_round_trip():
    tr = ThresholdTracker(window=4, default=0.33)
    for v in (0.1, 0.2, 0.3, 0.4, 0.5):
        tr.update(v)
    back = ThresholdTracker.from_json(json.loads(json.dumps(tr.to_json())))
    assert back.current == tr.current and list(back.values) == list(tr.values)
    back.update(0.9)
    assert back.current == pytest.approx(np.mean([0.3, 0.4, 0.5, 0.9]))


def test_tracker_reset():
    tr = ThresholdTracker(default=0.33)
    tr.update(0.9)
    tr.reset()
    assert tr.current == 0.33


def test_apply_threshold_is_strict():
    np.testing.assert_array_equal(apply_threshold([0.4, 0.5, 0.6], 0.5), [False, False, True])
    tr = ThresholdTracker(window=1).update(0.4)
    np.testing.assert_array_equal(apply_threshold([0.4, 0.5, 0.6], tr), [False, True, True])
