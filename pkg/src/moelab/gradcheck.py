"""Gradient verification harness.

Three widening scopes, each checked against central finite differences:

* ``layer``: every differentiable primitive, one case per op.
* ``losses``: the composite training losses on their own.
* ``full``: everything above plus MoE layer passes in all three routing
  modes and the complete competition-step training loss through a small
  model (attention, both MoE layers, all auxiliaries).

Two conventions keep the checks honest around the non-smooth parts:

* The distillation teacher is frozen at its unperturbed value before the
  check. The training loss treats the teacher as a constant, so the check
  must differentiate the same function the tape does; leaving the teacher
  live would measure the value-dependence the gradient deliberately drops.
* Selection (top-k, argmax) makes the loss piecewise smooth. Each model
  case probes the smallest gap between adjacent ranked scores and resamples
  the init seed until every token sits safely inside one piece; kinked
  activations (relu) get inputs bounded away from the kink.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers as ly
from . import losses as ls
from .autodiff import ParamStore, Tensor
from .losses import LossWeights

__all__ = ["SCOPES", "CheckCase", "GradCheckSummary", "run_gradcheck"]

SCOPES = ("layer", "losses", "full")
MARGIN = 1e-3  # minimum safe gap between adjacent ranked scores
MAX_SEED_TRIES = 40


@dataclass
class CheckCase:
    name: str
    report: ad.GradCheckReport
    seed: int = 0

    def ok(self, tol: float) -> bool:
        return self.report.ok(tol)


@dataclass
class GradCheckSummary:
    scope: str
    tol: float
    cases: list = field(default_factory=list)

    def ok(self) -> bool:
        return all(c.ok(self.tol) for c in self.cases)

    def failures(self) -> list:
        return [c for c in self.cases if not c.ok(self.tol)]

    def lines(self) -> list:
        out = []
        for c in self.cases:
            status = "ok" if c.ok(self.tol) else "FAIL"
            flag = " (unverifiable)" if c.report.unverifiable else ""
            out.append(f"{status:4s} {c.name:42s} max_rel_err={c.report.max_rel_error:.3e}{flag}")
        return out


def _case(name: str, build, seed: int = 0) -> CheckCase:
    """build(rng, params) registers parameters and returns the loss closure."""
    params = ParamStore()
    f = build(np.random.default_rng(seed), params)
    return CheckCase(name, ad.finite_diff_check(f, params), seed)


def _signed(rng, shape, lo=0.2, hi=1.5):
    """Values bounded away from zero, both signs: safe for kinks and division."""
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


# ---------------------------------------------------------------------------
# scope "layer": one case per primitive


def _primitive_cases(seed: int) -> list:
    cases = []

    def unary(name, fn, positive=False):
        def build(rng, params):
            raw = rng.uniform(0.3, 2.0, (3, 4)) if positive else _signed(rng, (3, 4))
            x = params.add("x", raw)
            return lambda _: ad.reduce_sum(fn(x))
        cases.append(_case(f"op.{name}", build, seed))

    unary("neg", lambda x: -x)
    unary("exp", ad.exp)
    unary("log", ad.log, positive=True)
    unary("sqrt", ad.sqrt, positive=True)
    unary("pow_const.cube", lambda x: ad.pow_const(x, 3.0))
    unary("pow_const.inv_sqrt", lambda x: ad.pow_const(x, -0.5), positive=True)
    for kind in ad.ACTIVATION_KINDS:
        unary(f"activation.{kind}", lambda x, k=kind: ad.activation(x, k))

    def binary(name, fn, safe_denom=False):
        def build(rng, params):
            a = params.add("a", _signed(rng, (3, 4)))
            braw = rng.uniform(0.5, 2.0, (4,)) * rng.choice([-1.0, 1.0], (4,)) \
                if safe_denom else _signed(rng, (4,))
            b = params.add("b", braw)
            return lambda _: ad.reduce_sum(fn(a, b))
        cases.append(_case(f"op.{name}", build, seed))

    binary("add.broadcast", lambda a, b: a + b)
    binary("sub.broadcast", lambda a, b: a - b)
    binary("mul.broadcast", lambda a, b: a * b)
    binary("div.broadcast", lambda a, b: a / b, safe_denom=True)

    def matmul_2d(rng, params):
        a = params.add("a", rng.standard_normal((3, 4)))
        b = params.add("b", rng.standard_normal((4, 5)))
        return lambda _: ad.reduce_sum(a @ b)
    cases.append(_case("op.matmul.2d", matmul_2d, seed))

    def matmul_batched(rng, params):
        a = params.add("a", rng.standard_normal((2, 3, 4)))
        b = params.add("b", rng.standard_normal((4, 5)))
        return lambda _: ad.reduce_sum(a @ b)
    cases.append(_case("op.matmul.batched_x_2d", matmul_batched, seed))

    def matmul_bb(rng, params):
        a = params.add("a", rng.standard_normal((2, 3, 4)))
        b = params.add("b", rng.standard_normal((2, 4, 5)))
        return lambda _: ad.reduce_sum(a @ b)
    cases.append(_case("op.matmul.batched_x_batched", matmul_bb, seed))

    def swap(rng, params):
        a = params.add("a", rng.standard_normal((2, 3, 4)))
        w = Tensor(rng.standard_normal((4, 3, 2)))
        return lambda _: ad.reduce_sum(ad.swapaxes(a, 0, 2) * w)
    cases.append(_case("op.swapaxes", swap, seed))

    def reshape_case(rng, params):
        a = params.add("a", rng.standard_normal((3, 4)))
        w = Tensor(rng.standard_normal((2, 6)))
        return lambda _: ad.reduce_sum(ad.reshape(a, (2, 6)) * w)
    cases.append(_case("op.reshape", reshape_case, seed))

    for axis, keep in ((None, False), (0, False), (-1, True)):
        def reduce_case(rng, params, axis=axis, keep=keep):
            a = params.add("a", rng.standard_normal((3, 4)))
            w = Tensor(rng.standard_normal((3, 1) if keep else ((4,) if axis == 0 else ())))
            if axis is None:
                return lambda _: ad.reduce_sum(a) * Tensor(np.asarray(1.7))
            return lambda _: ad.reduce_sum(ad.reduce_sum(a, axis=axis, keepdims=keep) * w)
        cases.append(_case(f"op.reduce_sum.axis_{axis}_keep_{keep}", reduce_case, seed))

    def reduce_mean_case(rng, params):
        a = params.add("a", rng.standard_normal((2, 3, 4)))
        w = Tensor(rng.standard_normal((2, 3, 1)))
        return lambda _: ad.reduce_sum(ad.reduce_mean(a, axis=-1, keepdims=True) * w)
    cases.append(_case("op.reduce_mean.axis_-1_keepdims", reduce_mean_case, seed))

    def softmax_case(rng, params):
        a = params.add("a", rng.standard_normal((3, 5)))
        w = Tensor(rng.standard_normal((3, 5)))
        return lambda _: ad.reduce_sum(ad.softmax(a, axis=-1) * w)
    cases.append(_case("op.softmax", softmax_case, seed))

    def softmax_masked_case(rng, params):
        a = params.add("a", rng.standard_normal((3, 5)))
        mask = np.ones((3, 5), dtype=bool)
        mask[:, -2:] = False
        w = Tensor(rng.standard_normal((3, 5)))
        return lambda _: ad.reduce_sum(
            ad.softmax(ad.masked_fill(a, mask, -np.inf), axis=-1) * w)
    cases.append(_case("op.softmax.neg_inf_masked", softmax_masked_case, seed))

    def logsumexp_case(rng, params):
        a = params.add("a", rng.standard_normal((3, 5)))
        return lambda _: ad.reduce_sum(ad.logsumexp(a, axis=-1))
    cases.append(_case("op.logsumexp", logsumexp_case, seed))

    def gather_case(rng, params):
        a = params.add("a", rng.standard_normal((5, 3)))
        idx = np.array([0, 2, 2, 4, 1])  # repeats: gradients must accumulate
        w = Tensor(rng.standard_normal((5, 3)))
        return lambda _: ad.reduce_sum(ad.gather_rows(a, idx) * w)
    cases.append(_case("op.gather_rows.repeated", gather_case, seed))

    def scatter_case(rng, params):
        a = params.add("a", rng.standard_normal((3, 4)))
        idx = np.array([4, 0, 2])
        w = Tensor(rng.standard_normal((6, 4)))
        return lambda _: ad.reduce_sum(ad.scatter_rows(a, idx, 6) * w)
    cases.append(_case("op.scatter_rows", scatter_case, seed))

    def take_along_case(rng, params):
        a = params.add("a", rng.standard_normal((4, 5)))
        idx = np.array([1, 1, 0, 4])
        w = Tensor(rng.standard_normal((4,)))
        return lambda _: ad.reduce_sum(ad.take_along_rows(a, idx) * w)
    cases.append(_case("op.take_along_rows", take_along_case, seed))

    def take_pairs_case(rng, params):
        a = params.add("a", rng.standard_normal((4, 5)))
        idx = np.array([[0, 2], [1, 1], [3, 4], [2, 0]])
        w = Tensor(rng.standard_normal((4, 2)))
        return lambda _: ad.reduce_sum(ad.take_pairs(a, idx) * w)
    cases.append(_case("op.take_pairs", take_pairs_case, seed))

    def select_outputs_case(rng, params):
        a = params.add("a", rng.standard_normal((3, 4, 2)))  # (N, T, D)
        idx = np.array([[0, 2], [1, 0], [2, 2], [1, 2]])  # (T, K)
        w = Tensor(rng.standard_normal((4, 2, 2)))
        return lambda _: ad.reduce_sum(ad.select_expert_outputs(a, idx) * w)
    cases.append(_case("op.select_expert_outputs", select_outputs_case, seed))

    def stack_case(rng, params):
        a = params.add("a", rng.standard_normal((3, 2)))
        b = params.add("b", rng.standard_normal((3, 2)))
        w = Tensor(rng.standard_normal((2, 3, 2)))
        return lambda _: ad.reduce_sum(ad.stack0([a, b]) * w)
    cases.append(_case("op.stack0", stack_case, seed))

    def masked_fill_case(rng, params):
        a = params.add("a", rng.standard_normal((3, 4)))
        mask = rng.random((3, 4)) > 0.4
        w = Tensor(rng.standard_normal((3, 4)))
        return lambda _: ad.reduce_sum(ad.masked_fill(a, mask, 0.5) * w)
    cases.append(_case("op.masked_fill", masked_fill_case, seed))

    return cases


# ---------------------------------------------------------------------------
# scope "losses"


def _loss_cases(seed: int) -> list:
    cases = []

    def nll_case(rng, params):
        logits = params.add("logits", rng.standard_normal((6, 5)))
        targets = rng.integers(0, 5, 6)
        return lambda _: ls.nll_loss(logits, targets)
    cases.append(_case("loss.nll", nll_case, seed))

    def distill_case(rng, params):
        raw = params.add("raw", rng.standard_normal((5, 4)))
        teacher = rng.dirichlet(np.ones(4), 5)
        slots = np.stack([rng.choice(4, 2, replace=False) for _ in range(5)])
        return lambda _: ls.distill_loss(ad.softmax(raw, axis=-1), teacher, slots, 0.1)
    cases.append(_case("loss.distill", distill_case, seed))

    def distill_plain_case(rng, params):
        raw = params.add("raw", rng.standard_normal((5, 4)))
        teacher = rng.dirichlet(np.ones(4), 5)
        slots = np.stack([rng.choice(4, 2, replace=False) for _ in range(5)])
        return lambda _: ls.distill_loss(ad.softmax(raw, axis=-1), teacher, slots, 0.0)
    cases.append(_case("loss.distill.alpha_zero", distill_plain_case, seed))

    def diversity_case(rng, params):
        outs = params.add("outs", _signed(rng, (6, 3, 4), lo=0.4))
        return lambda _: ls.diversity_loss(outs)
    cases.append(_case("loss.diversity", diversity_case, seed))

    def balance_case(rng, params):
        raw = params.add("raw", rng.standard_normal((8, 4)))
        top1 = rng.integers(0, 4, 8)  # held fixed: the count term is constant
        return lambda _: ls.balance_loss(ad.softmax(raw, axis=-1), top1, 4)
    cases.append(_case("loss.balance", balance_case, seed))

    def z_case(rng, params):
        logits = params.add("logits", rng.standard_normal((8, 4)))
        return lambda _: ls.z_loss(logits)
    cases.append(_case("loss.z", z_case, seed))

    return cases


# ---------------------------------------------------------------------------
# scope "full": layer passes and the complete competition step


def _min_rank_gap(scores: np.ndarray, depth: int) -> float:
    """Smallest gap between adjacent ranked scores within the top ``depth``."""
    s = np.sort(scores, axis=1)[:, ::-1]
    depth = min(depth, s.shape[1] - 1)
    return float((s[:, :depth] - s[:, 1:depth + 1]).min())


def _layer_margin(results, modes, k: int) -> float:
    worst = np.inf
    for res, mode in zip(results, modes):
        worst = min(worst, _min_rank_gap(res.router_logits.data, k + 2))
        if res.affinity is not None:
            worst = min(worst, _min_rank_gap(res.affinity.data, k + 2))
    return worst


def _build_layer(rng, params, d_model=4, d_hidden=6, n=3, k=2):
    cfg = ly.MoEConfig(n_experts=n, k_active=k)
    layer = ly.build_moe_layer(params, "moe", rng, d_model, d_hidden, cfg, act="gelu")
    x = params.add("x", rng.standard_normal((5, d_model)))
    return layer, x


def _layer_case(mode: str, seed: int) -> CheckCase:
    for attempt in range(MAX_SEED_TRIES):
        params = ParamStore()
        rng = np.random.default_rng(seed + attempt)
        layer, x = _build_layer(rng, params)
        with ad.Tape():
            if mode == "rank_shift":
                res = ly.rank_shift_route(x, layer)
            else:
                res = ly.moe_forward(x, layer, mode)
        if _layer_margin([res], [mode], layer.cfg.k_active) <= MARGIN:
            continue
        w = Tensor(np.random.default_rng(99).standard_normal(res.output.data.shape))

        def f(_):
            if mode == "rank_shift":
                r = ly.rank_shift_route(x, layer)
            else:
                r = ly.moe_forward(x, layer, mode)
            return ad.reduce_sum(r.output * w)

        return CheckCase(f"layer.{mode}", ad.finite_diff_check(f, params), seed + attempt)
    raise RuntimeError(f"no safe selection margin found for mode {mode!r}")


def _competition_step_case(seed: int, corrupt: bool = False) -> CheckCase:
    from .training import Model, ModelConfig

    cfg = ModelConfig(vocab_size=6, d_model=4, d_hidden=6, n_layers=2,
                      context_len=3, n_experts=3, k_active=2)
    modes = ["competition", "router"]
    data_rng = np.random.default_rng(2)
    inputs = data_rng.integers(0, 6, (2, 3))
    targets = data_rng.integers(0, 6, (2, 3))

    for attempt in range(MAX_SEED_TRIES):
        model = Model(cfg, seed=seed + attempt)
        with ad.Tape():
            _, base = model.forward(inputs, modes)
        if _layer_margin(base, modes, cfg.k_active) <= MARGIN:
            continue
        teachers = {i: r.competition_scores.data.copy()
                    for i, r in enumerate(base) if r.competition_scores is not None}
        slots = {i: r.decision.indices.copy() for i, r in enumerate(base)}
        w = LossWeights()

        def f(_):
            logits, results = model.forward(inputs, modes)
            total = ls.nll_loss(logits, targets.reshape(-1))
            for i, (res, mode) in enumerate(zip(results, modes)):
                top1 = np.argmax(res.router_logits.data, axis=1)
                total = total + w.balance * ls.balance_loss(
                    res.router_softmax, top1, cfg.n_experts)
                total = total + w.z * ls.z_loss(res.router_logits)
                if mode == "competition":
                    total = total + w.gamma * ls.distill_loss(
                        res.router_softmax, teachers[i], slots[i], w.alpha)
                    total = total + w.beta * ls.diversity_loss(res.winning_outputs)
            if corrupt:
                # deliberately wrong gradient: tape sees d/de (stop(e) * e) = e,
                # the true derivative of the value is 2e
                e = model.params["embedding"]
                total = total + ad.reduce_sum(e.detach() * e) * 0.01
            return total

        name = "full.competition_step" + (".corrupted" if corrupt else "")
        return CheckCase(name, ad.finite_diff_check(f, model.params), seed + attempt)
    raise RuntimeError("no safe selection margin found for the competition step")


# ---------------------------------------------------------------------------


def run_gradcheck(scope: str = "full", seed: int = 0, tol: float = 1e-5,
                  corrupt: bool = False) -> GradCheckSummary:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    summary = GradCheckSummary(scope=scope, tol=tol)
    summary.cases.extend(_primitive_cases(seed))
    if scope in ("losses", "full"):
        summary.cases.extend(_loss_cases(seed))
    if scope == "full":
        for mode in ("router", "competition", "rank_shift"):
            summary.cases.append(_layer_case(mode, seed))
        summary.cases.append(_competition_step_case(seed, corrupt=corrupt))
    return summary
