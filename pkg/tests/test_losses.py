import math

import numpy as np
import pytest
import torch

from changecast.losses import LossConfig, bce, combined_loss, forecast_loss, time_loss, timerange_targets
from changecast.network import timerange_probs

EPS = 1e-7


def loop_bce(p, y, eps=EPS):
    total, n = 0.0, 0
    for pi, yi in zip(np.ravel(p), np.ravel(y)):
        pi = min(max(float(pi), eps), 1.0 - eps)
        total += -(yi * math.log(pi) + (1 - yi) * math.log(1.0 - pi))
        n += 1
    return total / n


def loop_time_loss(p_e, y_e, y_c, eps=EPS):
    picked = [(p, y) for p, y, c in zip(np.ravel(p_e), np.ravel(y_e), np.ravel(y_c)) if c == 1]
    if not picked:
        return 0.0
    return loop_bce([p for p, _ in picked], [y for _, y in picked], eps)


def loop_combined(q_e, q_l, q_0, y_e, y_c, lam):
    p_e, p_c = [], []
    for a, b, c in zip(np.ravel(q_e), np.ravel(q_l), np.ravel(q_0)):
        p_e.append(math.exp(a) / (math.exp(a) + math.exp(b)))
        p_c.append(math.exp(a + b) / (math.exp(a + b) + math.exp(c)))
    lt = loop_time_loss(p_e, y_e, y_c)
    lb = loop_bce(p_c, y_c)
    return lt + lam * lb, lt, lb


def t(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


# ---------------------------------------------------------------- bce

def test_bce_perfect_prediction():
    y = t([[0, 1], [1, 0]])
    assert bce(y, y).item() <= -math.log(1 - EPS) + 1e-12


def test_bce_half():
    y = t(np.random.default_rng(0).integers(0, 2, (4, 4)))
    assert bce(torch.full_like(y, 0.5), y).item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_matches_loop_on_large_batch():
    rng = np.random.default_rng(1)
    p = rng.random((16, 224, 224))
    y = rng.integers(0, 2, (16, 224, 224))
    assert bce(t(p), t(y)).item() == pytest.approx(loop_bce(p, y), abs=1e-6)


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce(t(np.zeros(3)), t(np.zeros(4)))


# ---------------------------------------------------------------- time loss

def test_time_loss_empty_mask_is_zero():
    p = t(np.random.default_rng(0).random((3, 3)))
    assert time_loss(p, t(np.ones((3, 3))), t(np.zeros((3, 3)))).item() == 0.0


def test_time_loss_single_pixel():
    y_c = np.zeros((2, 2))
    y_c[1, 0] = 1
    p = np.full((2, 2), 0.9)
    p[1, 0] = 0.5
    assert time_loss(t(p), t(np.ones((2, 2))), t(y_c)).item() == pytest.approx(math.log(2), abs=1e-12)


def test_time_loss_matches_gather_loop():
    rng = np.random.default_rng(2)
    for _ in range(10):
        shape = tuple(rng.integers(1, 12, size=3))
        p, y_e, y_c = rng.random(shape), rng.integers(0, 2, shape), rng.random(shape) < 0.2
        assert time_loss(t(p), t(y_e), t(y_c)).item() == pytest.approx(loop_time_loss(p, y_e, y_c), abs=1e-6)


def test_time_loss_ignores_unchanged_pixels():
    rng = np.random.default_rng(3)
    p, y_e = rng.random((6, 6)), rng.integers(0, 2, (6, 6))
    y_c = rng.random((6, 6)) < 0.3
    p2 = p.copy()
    p2[~y_c] = rng.random((~y_c).sum())
    assert time_loss(t(p), t(y_e), t(y_c)).item() == time_loss(t(p2), t(y_e), t(y_c)).item()


# ---------------------------------------------------------------- forecast loss

def test_forecast_loss_zero_logits():
    y = t(np.random.default_rng(0).integers(0, 2, (5, 5)))
    assert forecast_loss(torch.zeros_like(y), y).item() == pytest.approx(math.log(2), abs=1e-12)


def test_forecast_loss_stable():
    v = forecast_loss(t([-100.0, -1e4]), t([0.0, 0.0])).item()
    assert math.isfinite(v) and v < 1e-40


def test_forecast_loss_matches_naive():
    rng = np.random.default_rng(4)
    x = rng.uniform(-20, 20, (8, 32, 32))
    y = rng.integers(0, 2, x.shape)
    naive = bce(torch.sigmoid(t(x)), t(y), eps=1e-300).item()
    assert forecast_loss(t(x), t(y)).item() == pytest.approx(naive, abs=1e-6)


# ---------------------------------------------------------------- combined loss

def test_combined_loss_defaults():
    cfg = LossConfig()
    assert cfg.lambda_mix == 1000.0
    z = t(np.zeros((2, 4, 4)))
    total, lt, lb = combined_loss(z, z, z, z, z)
    assert lt.item() == 0.0
    assert total.item() == pytest.approx(1000 * math.log(2), rel=1e-12)


def test_combined_loss_perfect_prediction():
    y_c = t([[1, 1, 0, 0]])
    y_e = t([[1, 0, 0, 0]])
    big = 30.0
    # early pixel: q_e >> q_l; late pixel: q_l >> q_e; both changed: q_e + q_l >> q_0
    q_e = t([[big, 0.0, 0.0, 0.0]])
    q_l = t([[0.0, big, 0.0, 0.0]])
    q_0 = t([[-big, -big, big, big]])
    total, _, _ = combined_loss(q_e, q_l, q_0, y_e, y_c)
    assert total.item() <= 1e-3


def test_combined_loss_matches_loop():
    rng = np.random.default_rng(5)
    for _ in range(5):
        shape = tuple(rng.integers(1, 8, size=3))
        q = rng.normal(0, 2, (3,) + shape)
        y_c = (rng.random(shape) < 0.3).astype(float)
        y_e = (rng.random(shape) < 0.5) * y_c
        got = combined_loss(t(q[0]), t(q[1]), t(q[2]), t(y_e), t(y_c), LossConfig(lambda_mix=7.0))
        want = loop_combined(q[0], q[1], q[2], y_e, y_c, 7.0)
        for g, w in zip(got, want):
            assert g.item() == pytest.approx(w, abs=1e-6)


def test_combined_loss_affine_in_lambda():
    rng = np.random.default_rng(6)
    q = t(rng.normal(size=(3, 2, 5, 5)))
    y_c = t(rng.random((2, 5, 5)) < 0.3)
    y_e = y_c * t(rng.random((2, 5, 5)) < 0.5)
    vals = {lam: combined_loss(q[0], q[1], q[2], y_e, y_c, LossConfig(lambda_mix=lam)) for lam in (1, 10, 1000)}
    lt, lb = vals[1][1].item(), vals[1][2].item()
    for lam, (total, _, _) in vals.items():
        assert total.item() == pytest.approx(lt + lam * lb, rel=1e-12)


def test_combined_loss_gradcheck():
    rng = np.random.default_rng(7)
    shape = (4, 8, 8)
    q = [torch.tensor(rng.normal(0, 1, shape), dtype=torch.float64, requires_grad=True) for _ in range(3)]
    y_c = t(rng.random(shape) < 0.3)
    y_e = y_c * t(rng.random(shape) < 0.5)
    assert torch.autograd.gradcheck(lambda a, b, c: combined_loss(a, b, c, y_e, y_c)[0], q, eps=1e-3,
                                    atol=1e-8, rtol=1e-4)


def test_losses_non_negative():
    rng = np.random.default_rng(8)
    for _ in range(20):
        q = t(rng.normal(0, 5, (3, 4, 4)))
        y_c = t(rng.random((4, 4)) < 0.5)
        y_e = y_c * t(rng.random((4, 4)) < 0.5)
        assert all(v.item() >= 0 for v in combined_loss(q[0], q[1], q[2], y_e, y_c))
        assert forecast_loss(q[0], y_c).item() >= 0


@pytest.mark.parametrize("kw", [dict(lambda_mix=0), dict(eps=0.0), dict(eps=0.01)])
def test_loss_config_validation(kw):
    with pytest.raises(ValueError):
        LossConfig(**kw)


def test_timerange_targets():
    fcm = torch.tensor([0, 1, 12, 13, 24, 25])
    y_e, y_c = timerange_targets(fcm)
    assert y_c.tolist() == [0, 1, 1, 1, 1, 0]
    assert y_e.tolist() == [0, 1, 1, 0, 0, 0]


def test_timerange_probs_used_by_combined_loss():
    q = t([[1.0]]), t([[0.0]]), t([[0.0]])
    p_e, p_c = timerange_probs(*q)
    total, lt, lb = combined_loss(*q, t([[1.0]]), t([[1.0]]), LossConfig(lambda_mix=1.0))
    assert lt.item() == pytest.approx(-math.log(p_e.item()))
    assert lb.item() == pytest.approx(-math.log(p_c.item()))
