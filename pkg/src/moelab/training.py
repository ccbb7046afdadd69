"""Training loop for the small MoE language model.

Model body: token embedding -> n_layers blocks of (optional single-head
causal self-attention) + MoE feed-forward, both behind parameter-free RMS
normalization and residual connections -> tied output head (logits through
the transposed embedding).

Per step t, each layer l consults the activation schedule: Lambda(l, t) = 1
runs the competition path, 0 the router path. Expert parameters always learn
from the task NLL (plus diversity on competition steps); router parameters
learn from NLL and the auxiliaries, plus the distillation pull toward the
competition weights on competition steps. Distillation treats the
competition policy as a detached teacher, so it never back-propagates into
the experts. One combined backward per step covers everything.

Three independent seed streams keep runs reproducible and comparable:
``seed`` (parameter init), ``data_seed`` (batch order), ``schedule_seed``
(competition schedule). A baseline run only zeroes the schedule; with
omega = 0 the scheduled run is bit-identical to it step for step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import layers as ly
from . import losses as ls
from . import schedule as sc
from .autodiff import Tensor
from .data import Corpus, batch_iterator, split_corpus, window_starts
from .losses import LossWeights
from .routing_metrics import AssignmentTable, expert_change_rate, level_learning

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "Model",
    "TrainingAbort",
    "TrainResult",
    "EvalResult",
    "cosine_lr",
    "SGD",
    "Adam",
    "train_step",
    "run_training",
    "eval_model",
    "save_checkpoint",
    "load_checkpoint",
    "restore_model",
    "METRICS_HEADER",
    "EVAL_HEADER",
]

CHECKPOINT_SCHEMA = 1
METRICS_HEADER = ("step", "nll", "l_d", "l_div", "balance", "z", "ppl", "active_layers")
EVAL_HEADER = ("step", "val_nll", "val_ppl", "ll_raw", "ll_norm", "ecr")


class TrainingAbort(RuntimeError):
    """Raised when a loss or update goes non-finite; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    d_hidden: int = 128
    n_layers: int = 2
    context_len: int = 16
    n_experts: int = 4
    k_active: int = 2
    kappa: str = "softplus"
    affinity_mode: str = "mean_kappa"
    expert_act: str = "gelu"
    attention: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "d_hidden", "n_layers", "context_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        self.moe_config()  # delegates expert-count and kappa validation

    def moe_config(self) -> ly.MoEConfig:
        return ly.MoEConfig(
            n_experts=self.n_experts,
            k_active=self.k_active,
            kappa=self.kappa,
            affinity_mode=self.affinity_mode,
        )


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 8
    lr: float = 0.5
    lr_min: float = 0.0
    optimizer: str = "sgd"  # "sgd" runs the plain schedule; "adam" opts in
    seed: int = 0
    data_seed: int = 100
    val_frac: float = 0.1
    omega: float = 0.07
    a_max: int = 9
    warmup_frac: float = 0.05
    schedule_seed: int = 0
    freeze_router_on_normal_steps: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    log_every: int = 50
    eval_every: int = 0  # 0: evaluate only at start and end
    eval_windows: int = 128
    checkpoint_every: int = 0  # 0: only the final checkpoint

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)


def cosine_lr(lr_max: float, lr_min: float, total_steps: int):
    """xi_t = lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2."""

    def schedule(step: int) -> float:
        frac = min(max(step, 0), total_steps) / max(total_steps, 1)
        return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))

    return schedule


def _rmsnorm(x: Tensor) -> Tensor:
    ms = ad.reduce_mean(x * x, axis=-1, keepdims=True)
    return x * ad.pow_const(ms + 1e-6, -0.5)


@dataclass
class _Block:
    attn_wq: Tensor | None
    attn_wk: Tensor | None
    attn_wv: Tensor | None
    attn_wo: Tensor | None
    moe: ly.MoELayer


class Model:
    """Parameter container plus the forward pass."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.params = ad.ParamStore()
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.embedding = self.params.add(
            "embedding", rng.standard_normal((config.vocab_size, d)) * (1.0 / np.sqrt(d))
        )
        self.blocks: list[_Block] = []
        for i in range(config.n_layers):
            if config.attention:
                scale = 1.0 / np.sqrt(d)
                wq = self.params.add(f"block{i}.attn.wq", rng.standard_normal((d, d)) * scale)
                wk = self.params.add(f"block{i}.attn.wk", rng.standard_normal((d, d)) * scale)
                wv = self.params.add(f"block{i}.attn.wv", rng.standard_normal((d, d)) * scale)
                wo = self.params.add(f"block{i}.attn.wo", rng.standard_normal((d, d)) * scale)
            else:
                wq = wk = wv = wo = None
            moe = ly.build_moe_layer(
                self.params, f"block{i}.moe", rng, d, config.d_hidden,
                config.moe_config(), act=config.expert_act,
            )
            self.blocks.append(_Block(wq, wk, wv, wo, moe))
        self._mask_cache: dict[int, np.ndarray] = {}

    def _causal_mask(self, ctx: int) -> np.ndarray:
        if ctx not in self._mask_cache:
            self._mask_cache[ctx] = np.tril(np.ones((ctx, ctx), dtype=bool))
        return self._mask_cache[ctx]

    def _attend(self, x3: Tensor, block: _Block) -> Tensor:
        h = _rmsnorm(x3)
        q = h @ block.attn_wq
        k = h @ block.attn_wk
        v = h @ block.attn_wv
        scale = 1.0 / np.sqrt(self.config.d_model)
        scores = (q @ ad.swapaxes(k, 1, 2)) * scale
        masked = ad.masked_fill(scores, self._causal_mask(x3.data.shape[1]), -np.inf)
        ctx = ad.softmax(masked, axis=-1) @ v
        return ctx @ block.attn_wo

    def forward(self, ids: np.ndarray, modes: list[str]):
        """ids (B, C) int; modes: per-layer "router"/"competition"/"rank_shift".
        Returns (logits (B*C, vocab), list of per-layer MoEForwardResult)."""
        b, c = ids.shape
        flat_ids = ids.reshape(-1)
        x = ad.gather_rows(self.embedding, flat_ids)
        x3 = ad.reshape(x, (b, c, self.config.d_model))
        results = []
        for block, mode in zip(self.blocks, modes):
            if self.config.attention:
                x3 = x3 + self._attend(x3, block)
            h = ad.reshape(_rmsnorm(x3), (b * c, self.config.d_model))
            if mode == "rank_shift":
                res = ly.rank_shift_route(h, block.moe)
            else:
                res = ly.moe_forward(h, block.moe, mode)
            results.append(res)
            x3 = x3 + ad.reshape(res.output, (b, c, self.config.d_model))
        h_final = ad.reshape(_rmsnorm(x3), (b * c, self.config.d_model))
        logits = h_final @ ad.swapaxes(self.embedding, 0, 1)
        return logits, results

    def total_expert_token_evals(self) -> int:
        return int(sum(b.moe.expert_token_evals.sum() for b in self.blocks))

    def reset_counters(self):
        for b in self.blocks:
            b.moe.reset_counters()


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    """p <- p - xi_t * g, exactly as the update rule is written."""

    name = "sgd"

    def __init__(self, params: ad.ParamStore):
        self._names = params.names()

    def step(self, params: ad.ParamStore, grads: dict, lr: float):
        for name in self._names:
            params[name].data -= lr * grads[name]

    def state_arrays(self) -> dict:
        return {}

    def load_state(self, arrays: dict):
        if arrays:
            raise ValueError("plain SGD carries no optimizer state")


class Adam:
    """Adaptive-moment option behind the config toggle."""

    name = "adam"

    def __init__(self, params: ad.ParamStore, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, params: ad.ParamStore, grads: dict, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, _ in params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            params[name].data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict:
        out = {"optimizer.t": np.array([float(self.t)])}
        for name in self.m:
            out[f"optimizer.m.{name}"] = self.m[name]
            out[f"optimizer.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict):
        self.t = int(arrays["optimizer.t"][0])
        for name in self.m:
            self.m[name] = arrays[f"optimizer.m.{name}"].copy()
            self.v[name] = arrays[f"optimizer.v.{name}"].copy()


def make_optimizer(kind: str, params: ad.ParamStore):
    return SGD(params) if kind == "sgd" else Adam(params)


# ---------------------------------------------------------------------------
# single step


def train_step(
    model: Model,
    optimizer,
    batch,
    modes: list[str],
    weights: LossWeights,
    step: int,
    freeze_router_on_normal_steps: bool = False,
) -> dict:
    """One combined forward/backward/update; returns the loss report."""
    inputs, targets = batch
    tape = ad.Tape()
    with tape:
        logits, results = model.forward(inputs, modes)
        nll = ls.nll_loss(logits, targets.reshape(-1))
        total = nll
        bal_sum = 0.0
        z_sum = 0.0
        ld_sum = 0.0
        ldiv_sum = 0.0
        n_compete = 0
        for res, mode in zip(results, modes):
            # auxiliaries regularize the router in both modes; the top-1 for
            # the balance count comes from the router's own logits
            top1 = np.argmax(res.router_logits.data, axis=1)
            bal = ls.balance_loss(res.router_softmax, top1, model.config.n_experts)
            zed = ls.z_loss(res.router_logits)
            total = total + weights.balance * bal + weights.z * zed
            bal_sum += bal.item()
            z_sum += zed.item()
            if mode == "competition":
                n_compete += 1
                teacher = res.competition_scores.detach()
                l_d = ls.distill_loss(
                    res.router_softmax, teacher, res.decision.indices, weights.alpha
                )
                l_div = ls.diversity_loss(res.winning_outputs)
                total = total + weights.gamma * l_d + weights.beta * l_div
                ld_sum += l_d.item()
                ldiv_sum += l_div.item()

    grads, _ = ad.reverse_accumulate(tape, total, model.params)

    if freeze_router_on_normal_steps:
        for i, mode in enumerate(modes):
            if mode != "competition":
                grads[f"block{i}.moe.router"][:] = 0.0

    lr = model.params.step_size(step)
    if not np.isfinite(total.item()):
        raise TrainingAbort(
            "non-finite loss",
            diagnostics={
                "step": step,
                "nll": nll.item(),
                "balance": bal_sum,
                "z": z_sum,
                "l_d": ld_sum,
                "l_div": ldiv_sum,
                "modes": list(modes),
                "lr": lr,
            },
        )
    optimizer.step(model.params, grads, lr)
    model.params.zero_grads()

    return {
        "step": step,
        "nll": nll.item(),
        "l_d": ld_sum,
        "l_div": ldiv_sum,
        "balance": bal_sum,
        "z": z_sum,
        "ppl": math.exp(min(nll.item(), 50.0)),
        "active_layers": n_compete,
        "total": total.item(),
        "lr": lr,
    }


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    nll: float
    ppl: float
    table: AssignmentTable
    n_tokens: int


def eval_model(
    model: Model,
    corpus: Corpus,
    routing: str = "router",
    max_windows: int = 0,
    batch_size: int = 32,
    checkpoint_step: int = -1,
) -> EvalResult:
    """Deterministic full pass over sequential windows, no recording.

    ``routing``: "router", "competition", or "rank_shift"; applied at every
    layer. Records the selected expert ids per (token, layer)."""
    if routing not in ("router", "competition", "rank_shift"):
        raise ValueError(f"unknown routing: {routing!r}")
    ctx = model.config.context_len
    starts = window_starts(len(corpus), ctx)
    if max_windows:
        starts = starts[:max_windows]
    modes = [routing] * model.config.n_layers

    total_nll = 0.0
    n_tokens = 0
    index_chunks = []
    for lo in range(0, starts.size, batch_size):
        chunk = starts[lo:lo + batch_size]
        offsets = chunk[:, None] + np.arange(ctx)[None, :]
        inputs = corpus.tokens[offsets]
        targets = corpus.tokens[offsets + 1].reshape(-1)
        logits, results = model.forward(inputs, modes)
        x = logits.data
        m = x.max(axis=1)
        lse = m + np.log(np.exp(x - m[:, None]).sum(axis=1))
        total_nll += float((lse - x[np.arange(x.shape[0]), targets]).sum())
        n_tokens += targets.size
        index_chunks.append(np.stack([r.decision.indices for r in results], axis=1))

    indices = np.concatenate(index_chunks, axis=0)
    table = AssignmentTable(
        indices=indices,
        fingerprint=corpus.fingerprint,
        checkpoint_step=checkpoint_step,
        routing=routing,
    )
    nll = total_nll / n_tokens
    return EvalResult(nll=nll, ppl=math.exp(min(nll, 50.0)), table=table, n_tokens=n_tokens)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + named little-endian float64 arrays, bit-exact


def save_checkpoint(path, model: Model, optimizer, step: int, extra: dict | None = None):
    arrays = {name: t.data for name, t in model.params.items()}
    arrays.update(optimizer.state_arrays())
    index = []
    offset = 0
    blobs = []
    for name in arrays:
        blob = np.ascontiguousarray(arrays[name], dtype="<f8").tobytes()
        index.append({
            "name": name,
            "offset": offset,
            "nbytes": len(blob),
            "shape": list(arrays[name].shape),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA,
        "step": step,
        "optimizer": optimizer.name,
        "config": {"model": asdict(model.config)},
        "extra": extra or {},
        "arrays": index,
    }
    payload = json.dumps(manifest, sort_keys=True).encode() + b"\n\x00" + b"".join(blobs)
    Path(path).write_bytes(payload)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    sep = raw.index(b"\n\x00")
    manifest = json.loads(raw[:sep].decode())
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema: {manifest.get('schema_version')!r}")
    body = raw[sep + 2:]
    arrays = {}
    for entry in manifest["arrays"]:
        blob = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8").reshape(entry["shape"]).copy()
    return manifest, arrays


def restore_model(path):
    """Rebuild a Model (and optimizer state) from a checkpoint file."""
    manifest, arrays = load_checkpoint(path)
    config = ModelConfig(**manifest["config"]["model"])
    model = Model(config, seed=0)
    for name, _ in model.params.items():
        if name not in arrays:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != model.params[name].data.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        model.params[name].data[:] = arrays[name]
    optimizer = make_optimizer(manifest["optimizer"], model.params)
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("optimizer.")}
    if opt_arrays:
        optimizer.load_state(opt_arrays)
    return model, optimizer, manifest


# ---------------------------------------------------------------------------
# full run


@dataclass
class TrainResult:
    model: Model
    metrics_rows: list
    eval_rows: list
    schedule: sc.ScheduleResult | None
    final_val: EvalResult
    dropped_activations: int


def _policy_alignment(model: Model, val: Corpus, cfg: TrainConfig, step: int):
    """Validation perplexity plus router-vs-competition table comparison."""
    by_router = eval_model(model, val, "router", max_windows=cfg.eval_windows,
                           checkpoint_step=step)
    by_comp = eval_model(model, val, "competition", max_windows=cfg.eval_windows,
                         checkpoint_step=step)
    raw, norm = level_learning(by_router.table, by_comp.table)
    ecr = expert_change_rate(by_router.table, by_comp.table)
    return by_router, {
        "step": step,
        "val_nll": by_router.nll,
        "val_ppl": by_router.ppl,
        "ll_raw": raw,
        "ll_norm": norm,
        "ecr": ecr,
    }


def run_training(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: Corpus,
    out_dir=None,
    baseline: bool = False,
    checkpoint_extra: dict | None = None,
) -> TrainResult:
    """Train and return the model plus metric/eval logs.

    ``baseline`` disables the competition mechanism entirely (all-zero
    schedule, hence no distillation and no diversity loss); everything else,
    including every seed stream, is untouched, so a baseline run is the
    exact control for a scheduled run.
    """
    train, val = split_corpus(corpus, train_cfg.val_frac)
    model = Model(model_cfg, train_cfg.seed)
    model.params.lr_schedule = cosine_lr(train_cfg.lr, train_cfg.lr_min, train_cfg.steps)
    optimizer = make_optimizer(train_cfg.optimizer, model.params)

    if baseline:
        schedule_result = None
        matrix = np.zeros((model_cfg.n_layers, train_cfg.steps), dtype=np.int8)
        dropped = 0
    else:
        spec = sc.ScheduleSpec(
            n_layers=model_cfg.n_layers,
            horizon=train_cfg.steps,
            omega=train_cfg.omega,
            a_max=train_cfg.a_max,
            warmup_frac=train_cfg.warmup_frac,
            seed=train_cfg.schedule_seed,
        )
        schedule_result = sc.generate_schedule(spec)
        matrix = schedule_result.matrix
        dropped = schedule_result.dropped

    batches = batch_iterator(train, train_cfg.batch_size, model_cfg.context_len,
                             seed=train_cfg.data_seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    metrics_rows = []
    eval_rows = []
    _, row0 = _policy_alignment(model, val, train_cfg, step=0)
    eval_rows.append(row0)

    for step in range(train_cfg.steps):
        modes = ["competition" if matrix[l, step] else "router"
                 for l in range(model_cfg.n_layers)]
        report = train_step(
            model, optimizer, next(batches), modes, train_cfg.weights, step,
            freeze_router_on_normal_steps=train_cfg.freeze_router_on_normal_steps,
        )
        if step % train_cfg.log_every == 0 or step == train_cfg.steps - 1:
            metrics_rows.append({k: report[k] for k in METRICS_HEADER})
        if train_cfg.eval_every and (step + 1) % train_cfg.eval_every == 0 \
                and (step + 1) < train_cfg.steps:
            _, row = _policy_alignment(model, val, train_cfg, step=step + 1)
            eval_rows.append(row)
        if out_dir is not None and train_cfg.checkpoint_every \
                and (step + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"step{step + 1:07d}.ckpt", model, optimizer,
                            step + 1, extra=checkpoint_extra)

    final_eval, final_row = _policy_alignment(model, val, train_cfg,
                                              step=train_cfg.steps)
    eval_rows.append(final_row)
    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", model, optimizer, train_cfg.steps,
                        extra=checkpoint_extra)

    return TrainResult(
        model=model,
        metrics_rows=metrics_rows,
        eval_rows=eval_rows,
        schedule=schedule_result,
        final_val=final_eval,
        dropped_activations=dropped,
    )


def write_metrics_csv(rows: list, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[k]) for k in METRICS_HEADER) + "\n")


def write_eval_csv(rows: list, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(EVAL_HEADER) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[k]) for k in EVAL_HEADER) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)
