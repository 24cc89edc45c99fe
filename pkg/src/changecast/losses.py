"""Change-detection, forecasting and time-range losses.

All reductions are means over the pixels a term covers, so the mixing weight
does not depend on patch resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .network import split_logits, timerange_probs


@dataclass
class LossConfig:
    lambda_mix: float = 1000.0
    eps: float = 1e-7

    def __post_init__(self):
        if self.lambda_mix <= 0:
            raise ValueError("lambda_mix must be > 0")
        if not 0 < self.eps < 1e-3:
            raise ValueError("eps must lie in (0, 1e-3)")


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def bce(p, y, eps: float = 1e-7):
    """Mean binary cross-entropy of probabilities clamped to [eps, 1 - eps]."""
    _check_shapes(p, y)
    p = p.clamp(eps, 1.0 - eps)
    y = y.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def time_loss(p_e, y_e, y_c, eps: float = 1e-7):
    """Early-vs-late BCE over changed pixels only; 0 when nothing changed."""
    _check_shapes(p_e, y_e)
    _check_shapes(p_e, y_c)
    sel = y_c.bool()
    if not sel.any():
        return p_e.sum() * 0.0
    return bce(p_e[sel], y_e[sel], eps)


def forecast_loss(logits, y_c):
    """BCE of sigmoid(logits) against y_c, in logit form."""
    _check_shapes(logits, y_c)
    return F.binary_cross_entropy_with_logits(logits, y_c.to(logits.dtype))


def combined_loss(q_e, q_l, q_0, y_e, y_c, cfg: LossConfig | None = None):
    """Returns (total, time term, binary term); total = time + lambda * binary."""
    cfg = cfg or LossConfig()
    p_e, p_c = timerange_probs(q_e, q_l, q_0)
    l_time = time_loss(p_e, y_e, y_c, cfg.eps)
    l_bin = bce(p_c, y_c, cfg.eps)
    return l_time + cfg.lambda_mix * l_bin, l_time, l_bin


def timerange_targets(first_change_month, horizon: int = 24, early_months: int = 12):
    """(y_e, y_c) from a first-change-month map."""
    y_c = (first_change_month >= 1) & (first_change_month <= horizon)
    y_e = y_c & (first_change_month <= early_months)
    return y_e.float(), y_c.float()


def combined_loss_from_logits(logits, first_change_month, cfg: LossConfig | None = None, horizon: int = 24):
    q_e, q_l, q_0 = split_logits(logits)
    y_e, y_c = timerange_targets(first_change_month, horizon)
    return combined_loss(q_e, q_l, q_0, y_e.to(logits.dtype), y_c.to(logits.dtype), cfg)
