"""Training losses: next-token NLL, router-to-competition distillation,
winner-diversity regularization, and the two standard router auxiliaries
(load balance and logit z-loss).

Gradient-flow conventions, applied by the trainer and baked into tests:
  * the distillation target (competition weights) is detached -- distillation
    moves the router, never the experts;
  * the diversity loss touches only the winning experts' outputs, so its
    gradient reaches expert parameters and not the router;
  * balance and z losses attach to router logits only, never to competition
    scores.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "LossWeights",
    "nll_loss",
    "distill_loss",
    "diversity_loss",
    "balance_loss",
    "z_loss",
]


@dataclass
class LossWeights:
    """Loss coefficients; defaults follow the reference training recipe."""

    alpha: float = 0.1  # extra weight on selected-expert distillation error
    gamma: float = 0.01  # distillation loss coefficient
    beta: float = 0.005  # diversity loss coefficient
    balance: float = 0.01  # load-balance auxiliary coefficient
    z: float = 0.001  # router logit z-loss coefficient

    def __post_init__(self):
        for name in ("alpha", "gamma", "beta", "balance", "z"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss coefficient {name} must be >= 0")


def nll_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    targets = np.asarray(targets)
    lse = ad.logsumexp(logits, axis=-1)
    picked = ad.take_along_rows(logits, targets)
    return (lse - picked).mean()


def _as_2d(t: Tensor) -> Tensor:
    if t.data.ndim == 1:
        return ad.reshape(t, (1, t.data.shape[0]))
    return t


def distill_loss(s_router: Tensor, s_competition, selected: np.ndarray, alpha: float) -> Tensor:
    """MSE(s_R, s_C) plus (alpha / K) * sum over selected experts of the
    squared gap, averaged over tokens.

    ``s_competition`` is treated as the (constant) teacher: pass a detached
    tensor or a plain array. ``selected`` is (T, K) int (or (K,) for a single
    token). alpha = 0 recovers the plain-MSE variant.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    s_r = _as_2d(s_router)
    s_c = _as_2d(ad.as_tensor(s_competition))
    if s_r.data.shape != s_c.data.shape:
        raise ValueError("router and competition score shapes differ")
    selected = np.atleast_2d(np.asarray(selected))
    k = selected.shape[1]

    diff = s_r - s_c
    mse = (diff * diff).mean()  # averages over tokens and all N experts
    gap = ad.take_pairs(s_r, selected) - ad.take_pairs(s_c, selected)
    sel_term = ad.reduce_sum(gap * gap, axis=1).mean() * (alpha / k)
    return mse + sel_term


def diversity_loss(winning_outputs: Tensor) -> Tensor:
    """Mean off-diagonal cosine similarity between winning experts' outputs.

    ``winning_outputs`` is (T, K, D) (or (K, D) for one token). Rows are
    unit-normalized; an all-zero output row cannot be normalized, so its
    similarities count as 0 and a warning is emitted. K = 1 returns 0 by
    convention (no pairs to decorrelate).
    """
    o = winning_outputs
    if o.data.ndim == 2:
        o = ad.reshape(o, (1,) + o.data.shape)
    t, k, _ = o.data.shape
    if k == 1:
        return ad.as_tensor(0.0)

    sq = ad.reduce_sum(o * o, axis=2, keepdims=True)
    norms = ad.sqrt(sq)
    zero_rows = norms.data == 0.0
    if np.any(zero_rows):
        warnings.warn("zero winning-expert output row; its similarities count as 0")
    # adding 1 where the norm is zero leaves those rows exactly 0 after division
    safe = norms + Tensor(zero_rows.astype(np.float64))
    unit = o / safe
    sims = unit @ ad.swapaxes(unit, 1, 2)  # (T, K, K)
    off = 1.0 - np.eye(k)
    total = ad.reduce_sum(sims * Tensor(np.broadcast_to(off, sims.data.shape).copy()))
    return total / float(t * k * (k - 1))


def balance_loss(router_probs: Tensor, top1: np.ndarray, n_experts: int) -> Tensor:
    """Switch-style load balance: N * sum_i f_i * P_i with f_i the fraction
    of tokens whose rank-1 expert is i (constant) and P_i the mean router
    probability of expert i (differentiable)."""
    top1 = np.asarray(top1).reshape(-1)
    t = router_probs.data.shape[0]
    if top1.shape[0] != t:
        raise ValueError("one top-1 index per token required")
    f = np.bincount(top1, minlength=n_experts).astype(np.float64) / t
    p_mean = ad.reduce_mean(router_probs, axis=0)
    return ad.reduce_sum(p_mean * Tensor(f)) * float(n_experts)


def z_loss(router_logits: Tensor) -> Tensor:
    """Mean squared logsumexp of the router logits (keeps logits bounded)."""
    lse = ad.logsumexp(router_logits, axis=-1)
    return (lse * lse).mean()
