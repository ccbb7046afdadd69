"""Sparse mixture-of-experts layer with two interchangeable routing paths.

Router path: a learned linear router scores the experts, the top K logits
survive (rest masked to -inf), and a softmax over the masked logits gives the
mixture weights. Only the K selected expert FFNs run per token.

Competition path: every expert runs, each expert's affinity is the mean of a
nonnegative transform of its own output (or its output norm), the top K
affinities are kept and renormalized to sum to one. The expert outputs are
mixed with those weights, and the router's full softmax is computed on the
side so a distillation loss can pull the router toward the competition
policy.

All selections break ties toward the lower expert index, and every selection
is a constant during backward (straight-through convention).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "MoEConfig",
    "ExpertFFN",
    "Router",
    "MoELayer",
    "RoutingDecision",
    "MoEForwardResult",
    "RoutingDegenerateError",
    "topk_indices",
    "topk_neg_inf",
    "topk_zero",
    "route_softmax",
    "competition_affinity",
    "competition_route",
    "moe_forward",
    "rank_shift_route",
    "build_moe_layer",
]

AFFINITY_MODES = ("mean_kappa", "l2_norm")


class RoutingDegenerateError(RuntimeError):
    """All selected affinities were zero; competition weights are undefined."""


@dataclass
class MoEConfig:
    """Static layer configuration. K strictly below N: routing must be sparse."""

    n_experts: int
    k_active: int
    kappa: str = "softplus"
    affinity_mode: str = "mean_kappa"

    def __post_init__(self):
        if not (1 <= self.k_active < self.n_experts):
            raise ValueError(
                f"need 1 <= K < N, got K={self.k_active}, N={self.n_experts}"
            )
        if self.kappa not in ad.ACTIVATION_KINDS:
            raise ValueError(f"unknown kappa: {self.kappa!r}")
        if self.affinity_mode not in AFFINITY_MODES:
            raise ValueError(f"unknown affinity mode: {self.affinity_mode!r}")


class ExpertFFN:
    """Two-layer feed-forward expert: act(x W1 + b1) W2 + b2."""

    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, act: str = "gelu"):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.activation(x @ self.w1 + self.b1, self.act)
        return h @ self.w2 + self.b2


class Router:
    """Linear router: logits(x) = x @ weight, one column per expert."""

    def __init__(self, weight: Tensor):
        self.weight = weight

    def logits(self, x: Tensor) -> Tensor:
        return x @ self.weight


@dataclass
class RoutingDecision:
    """Constant record of one routing outcome over a token batch.

    ``indices`` is (T, K) in rank order (best first; ties to the lower
    index), ``weights`` the matching normalized weights, and ``full_scores``
    the per-token N-vector of the selection weights with exact zeros at
    unselected experts; see ``route_softmax``."""

    indices: np.ndarray
    weights: np.ndarray
    full_scores: np.ndarray

    def weight_matrix(self, n_experts: int) -> np.ndarray:
        """(T, N) matrix of selected weights, exact zeros elsewhere."""
        t = self.indices.shape[0]
        out = np.zeros((t, n_experts))
        np.put_along_axis(out, self.indices, self.weights, axis=1)
        return out


@dataclass
class MoEForwardResult:
    output: Tensor
    decision: RoutingDecision
    router_logits: Tensor
    router_softmax: Tensor  # full (unmasked) softmax of the router logits
    competition_scores: Tensor | None = None  # (T, N) normalized, zeros off-top-K
    winning_outputs: Tensor | None = None  # (T, K, D) outputs of selected experts
    affinity: Tensor | None = None  # (T, N) raw pre-selection affinity


class MoELayer:
    """Expert bank + router + config, with evaluation counters."""

    def __init__(self, experts: list, router: Router, cfg: MoEConfig):
        if len(experts) != cfg.n_experts:
            raise ValueError("expert count does not match config")
        self.experts = experts
        self.router = router
        self.cfg = cfg
        self.expert_token_evals = np.zeros(cfg.n_experts, dtype=np.int64)

    def reset_counters(self):
        self.expert_token_evals[:] = 0


# ---------------------------------------------------------------------------
# selection primitives (pure array in, pure array out)


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k indices in rank order; ties go to the lower index.

    Stable argsort of the negated scores: equal values keep ascending index
    order, which is exactly the tie-break rule.
    """
    scores = np.atleast_2d(scores)
    n = scores.shape[1]
    if not (1 <= k <= n):
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def _selection_mask(scores: np.ndarray, k: int) -> np.ndarray:
    idx = topk_indices(scores, k)
    mask = np.zeros(np.atleast_2d(scores).shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=1)
    return mask


def topk_neg_inf(scores: np.ndarray, k: int) -> np.ndarray:
    """Copy of ``scores`` with everything outside the row top-k set to -inf."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    return np.where(_selection_mask(scores, k), scores, -np.inf)


def topk_zero(scores: np.ndarray, k: int) -> np.ndarray:
    """Copy of ``scores`` with everything outside the row top-k set to 0."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    return np.where(_selection_mask(scores, k), scores, 0.0)


# ---------------------------------------------------------------------------
# routing paths


def route_softmax(x: Tensor, router: Router, k: int):
    """Standard sparse routing: softmax over top-k-masked router logits.

    Returns (decision, weights, logits, full_softmax) where ``weights`` is the
    differentiable (T, N) weight matrix (exact zeros at masked entries, since
    exp(-inf) == 0) and ``full_softmax`` the unmasked router distribution used
    by the balance loss and as the distillation student.
    """
    logits = router.logits(x)
    idx = topk_indices(logits.data, k)
    mask = np.zeros(logits.data.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=1)
    masked = ad.masked_fill(logits, mask, -np.inf)
    weights = ad.softmax(masked, axis=-1)
    full_sm = ad.softmax(logits, axis=-1)
    sel_w = np.take_along_axis(weights.data, idx, axis=1)
    decision = RoutingDecision(indices=idx, weights=sel_w, full_scores=full_sm.data.copy())
    return decision, weights, logits, full_sm


def competition_affinity(x: Tensor, experts: list, cfg: MoEConfig):
    """Dense expert pass plus per-expert affinity scores.

    mean_kappa: affinity of expert e on token t is the mean over output
    coordinates of kappa(expert_e(x_t)). l2_norm: the Euclidean norm of the
    output instead.
    Returns (affinity (T, N), stacked outputs (N, T, D)).
    """
    outs = [e(x) for e in experts]
    stacked = ad.stack0(outs)  # (N, T, D)
    if cfg.affinity_mode == "mean_kappa":
        scores_nt = ad.reduce_mean(ad.activation(stacked, cfg.kappa), axis=2)
    else:
        scores_nt = ad.sqrt(ad.reduce_sum(stacked * stacked, axis=2))
    affinity = ad.swapaxes(scores_nt, 0, 1)  # (T, N)
    return affinity, stacked


def competition_route(affinity: Tensor, k: int):
    """Keep the top-k affinities per token and renormalize them to sum to 1.

    Raises RoutingDegenerateError when a token's selected affinities sum to
    zero (possible for kappa like relu); softplus affinities are strictly
    positive so the default configuration cannot trigger it.
    """
    idx = topk_indices(affinity.data, k)
    mask = np.zeros(affinity.data.shape, dtype=np.float64)
    np.put_along_axis(mask, idx, 1.0, axis=1)
    kept = affinity * Tensor(mask)
    denom = ad.reduce_sum(kept, axis=1, keepdims=True)
    if np.any(denom.data <= 0.0):
        raise RoutingDegenerateError(
            "selected affinities sum to zero; competition weights undefined"
        )
    weights = kept / denom  # (T, N), zeros off-selection
    sel_w = np.take_along_axis(weights.data, idx, axis=1)
    decision = RoutingDecision(indices=idx, weights=sel_w, full_scores=weights.data.copy())
    return decision, weights


def _mix_outputs(stacked: Tensor, weights: Tensor) -> Tensor:
    """sum_e weights[:, e] * expert_out_e; stacked (N, T, D), weights (T, N)."""
    per_token = ad.swapaxes(stacked, 0, 1)  # (T, N, D)
    t, n = weights.data.shape
    w3 = ad.reshape(weights, (t, n, 1))
    return ad.reduce_sum(per_token * w3, axis=1)


def moe_forward(x: Tensor, layer: MoELayer, mode: str) -> MoEForwardResult:
    """One MoE layer pass in "router" or "competition" mode.

    Router mode runs exactly the K selected experts per token (gather ->
    expert FFN -> weighted scatter). Competition mode runs all N experts,
    mixes with normalized top-K affinities, and still evaluates the router's
    full softmax so the caller can distill it toward the competition policy.
    Token counts per expert accumulate in ``layer.expert_token_evals``.
    """
    cfg = layer.cfg
    k = cfg.k_active
    t_tokens = x.data.shape[0]

    if mode == "router":
        decision, weights, logits, full_sm = route_softmax(x, layer.router, k)
        acc = None
        for e in range(cfg.n_experts):
            tok = np.nonzero((decision.indices == e).any(axis=1))[0]
            if tok.size == 0:
                continue
            layer.expert_token_evals[e] += tok.size
            sub = ad.gather_rows(x, tok)
            out_e = layer.experts[e](sub)
            col = ad.take_along_rows(weights, np.full(t_tokens, e))
            w_sel = ad.gather_rows(ad.reshape(col, (t_tokens, 1)), tok)
            contrib = ad.scatter_rows(out_e * w_sel, tok, t_tokens)
            acc = contrib if acc is None else acc + contrib
        return MoEForwardResult(
            output=acc,
            decision=decision,
            router_logits=logits,
            router_softmax=full_sm,
        )

    if mode == "competition":
        affinity, stacked = competition_affinity(x, layer.experts, cfg)
        layer.expert_token_evals += t_tokens
        decision, weights = competition_route(affinity, k)
        output = _mix_outputs(stacked, weights)
        logits = layer.router.logits(x)
        full_sm = ad.softmax(logits, axis=-1)
        winning = ad.select_expert_outputs(stacked, decision.indices)
        return MoEForwardResult(
            output=output,
            decision=decision,
            router_logits=logits,
            router_softmax=full_sm,
            competition_scores=weights,
            winning_outputs=winning,
            affinity=affinity,
        )

    raise ValueError(f"unknown mode: {mode!r}")


def rank_shift_route(x: Tensor, layer: MoELayer, k: int = None) -> MoEForwardResult:
    """Perturbed routing probe: drop the rank-1 expert, promote rank-(K+1).

    The selected set becomes {rank K+1, rank 2, ..., rank K} (slot 0 holds
    the substitute) and the weights are the softmax of those experts'
    original logits. Requires K + 1 <= N.
    """
    cfg = layer.cfg
    k = cfg.k_active if k is None else k
    if k + 1 > cfg.n_experts:
        raise ValueError("rank shift needs K + 1 <= N")
    t_tokens = x.data.shape[0]
    logits = layer.router.logits(x)
    full_sm = ad.softmax(logits, axis=-1)
    ranked = topk_indices(logits.data, k + 1)
    idx = np.concatenate([ranked[:, k:k + 1], ranked[:, 1:k]], axis=1)
    shifted = ad.take_pairs(logits, idx)
    sel_weights = ad.softmax(shifted, axis=-1)  # (T, K)

    acc = None
    for e in range(cfg.n_experts):
        tok = np.nonzero((idx == e).any(axis=1))[0]
        if tok.size == 0:
            continue
        layer.expert_token_evals[e] += tok.size
        slot = (idx[tok] == e).argmax(axis=1)
        sub = ad.gather_rows(x, tok)
        out_e = layer.experts[e](sub)
        w_rows = ad.gather_rows(sel_weights, tok)
        w_sel = ad.reshape(ad.take_along_rows(w_rows, slot), (tok.size, 1))
        contrib = ad.scatter_rows(out_e * w_sel, tok, t_tokens)
        acc = contrib if acc is None else acc + contrib

    full = np.zeros(logits.data.shape)
    np.put_along_axis(full, idx, sel_weights.data, axis=1)
    decision = RoutingDecision(indices=idx, weights=sel_weights.data.copy(), full_scores=full)
    return MoEForwardResult(
        output=acc,
        decision=decision,
        router_logits=logits,
        router_softmax=full_sm,
    )


# ---------------------------------------------------------------------------
# construction


def build_moe_layer(
    store: "ad.ParamStore",
    prefix: str,
    rng: np.random.Generator,
    d_model: int,
    d_hidden: int,
    cfg: MoEConfig,
    act: str = "gelu",
) -> MoELayer:
    """Create a layer whose parameters are registered under ``prefix``."""
    experts = []
    s1 = 1.0 / np.sqrt(d_model)
    s2 = 1.0 / np.sqrt(d_hidden)
    for e in range(cfg.n_experts):
        w1 = store.add(f"{prefix}.expert{e}.w1", rng.standard_normal((d_model, d_hidden)) * s1)
        b1 = store.add(f"{prefix}.expert{e}.b1", np.zeros(d_hidden))
        w2 = store.add(f"{prefix}.expert{e}.w2", rng.standard_normal((d_hidden, d_model)) * s2)
        b2 = store.add(f"{prefix}.expert{e}.b2", np.zeros(d_model))
        experts.append(ExpertFFN(w1, b1, w2, b2, act=act))
    router_w = store.add(f"{prefix}.router", rng.standard_normal((d_model, cfg.n_experts)) * 0.02)
    return MoELayer(experts, Router(router_w), cfg)
