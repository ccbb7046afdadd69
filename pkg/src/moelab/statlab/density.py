"""Gaussian mixture-of-experts conditional density and sampling.

The model: given input x, component i is chosen with probability

    w_i(x) = exp(softplus(g_i(x)) + c_i) / sum_j exp(softplus(g_j(x)) + c_j)

and y is drawn from Normal(g_i(x), nu_i). The gating reuses the experts' own
outputs; exp(softplus(z)) equals 1 + exp(z) exactly, so with all c_i = 0 the
gate weights are proportional to 1 + exp(g_i(x)). Everything works in
log-space throughout.

Expert kinds: "linear" g(x) = a.x + b with flat parameters [a..., b];
"ffn" g(x) = w2 * softplus(w1.x + b) with flat parameters [w2, w1..., b]
(one hidden unit, scalar output).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ..autodiff import sigmoid, stable_softplus

__all__ = [
    "EXPERT_KINDS",
    "Atom",
    "MixingMeasure",
    "ResolutionError",
    "expert_outputs",
    "gate_log_weights",
    "log_density",
    "density",
    "sample_dataset",
    "tv_distance",
]

EXPERT_KINDS = ("linear", "ffn")
LOG_2PI = float(np.log(2.0 * np.pi))


class ResolutionError(ValueError):
    """The y-grid is too coarse to resolve a density (normalization off)."""


@dataclass(frozen=True)
class Atom:
    """One mixture component: expert parameters, variance, gating bias.

    The component's mixing mass scales with exp(c); c = 0 for every atom
    recovers purely expert-driven gating.
    """

    expert: np.ndarray
    nu: float
    c: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "expert", np.asarray(self.expert, dtype=np.float64))
        if self.expert.ndim != 1:
            raise ValueError("expert parameters must be a flat vector")
        if not self.nu > 0:
            raise ValueError(f"variance must be positive, got {self.nu}")

    def flat(self) -> np.ndarray:
        return np.concatenate([self.expert, [self.nu, self.c]])


@dataclass(frozen=True)
class MixingMeasure:
    kind: str
    atoms: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in EXPERT_KINDS:
            raise ValueError(f"kind must be one of {EXPERT_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "atoms", tuple(self.atoms))
        if not self.atoms:
            raise ValueError("need at least one atom")
        p = self.atoms[0].expert.size
        if any(a.expert.size != p for a in self.atoms):
            raise ValueError("atoms disagree on expert parameter count")

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def d_in(self) -> int:
        p = self.atoms[0].expert.size
        return p - 1 if self.kind == "linear" else p - 2

    def arrays(self):
        """(expert (N, p), nu (N,), c (N,)) views for vectorized evaluation."""
        e = np.stack([a.expert for a in self.atoms])
        nu = np.array([a.nu for a in self.atoms])
        c = np.array([a.c for a in self.atoms])
        return e, nu, c

    def masses(self) -> np.ndarray:
        return np.exp(np.array([a.c for a in self.atoms]))


def _as_inputs(x, d_in: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        # ambiguous: a single d_in-vector or n scalar inputs; d_in decides
        x = x.reshape(1, -1) if x.size == d_in and d_in > 1 else x.reshape(-1, 1)
    if x.shape[1] != d_in:
        raise ValueError(f"inputs have dimension {x.shape[1]}, expected {d_in}")
    return x


def expert_outputs(measure: MixingMeasure, x) -> np.ndarray:
    """(n, N) matrix of g_i(x_t) for every atom i and input row t."""
    e, _, _ = measure.arrays()
    x = _as_inputs(x, measure.d_in)
    if measure.kind == "linear":
        a, b = e[:, :-1], e[:, -1]
        return x @ a.T + b
    w2, w1, b = e[:, 0], e[:, 1:-1], e[:, -1]
    return w2 * stable_softplus(x @ w1.T + b)


def gate_log_weights(measure: MixingMeasure, x, outputs: np.ndarray = None) -> np.ndarray:
    """(n, N) log gate weights; rows normalize to 1 in probability space."""
    g = expert_outputs(measure, x) if outputs is None else outputs
    _, _, c = measure.arrays()
    h = stable_softplus(g) + c
    return h - logsumexp(h, axis=1, keepdims=True)


def log_density(measure: MixingMeasure, x, y) -> np.ndarray:
    """log p(y_t | x_t) for paired rows of x and y; returns (n,)."""
    g = expert_outputs(measure, x)
    _, nu, _ = measure.arrays()
    log_w = gate_log_weights(measure, x, outputs=g)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if y.shape[0] != g.shape[0]:
        raise ValueError("x and y row counts differ")
    log_norm = -0.5 * (LOG_2PI + np.log(nu)) - (y - g) ** 2 / (2.0 * nu)
    return logsumexp(log_w + log_norm, axis=1)


def density(measure: MixingMeasure, x, y) -> np.ndarray:
    return np.exp(log_density(measure, x, y))


def _density_on_grid(measure: MixingMeasure, x: np.ndarray, y_grid: np.ndarray) -> np.ndarray:
    """(n, n_y) density values p(y_grid | x_t); one expert pass per call."""
    g = expert_outputs(measure, x)  # (n, N)
    _, nu, _ = measure.arrays()
    log_w = gate_log_weights(measure, x, outputs=g)  # (n, N)
    diff = y_grid[None, :, None] - g[:, None, :]  # (n, n_y, N)
    log_norm = -0.5 * (LOG_2PI + np.log(nu)) - diff**2 / (2.0 * nu)
    return np.exp(logsumexp(log_w[:, None, :] + log_norm, axis=2))


def sample_dataset(measure: MixingMeasure, n: int, seed, x_low=-1.0, x_high=1.0):
    """n i.i.d. pairs: x uniform on [x_low, x_high]^d, component by gate
    weight, y Gaussian around the chosen expert's output. Returns (x, y)."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    x = rng.uniform(x_low, x_high, (n, measure.d_in))
    g = expert_outputs(measure, x)
    w = np.exp(gate_log_weights(measure, x, outputs=g))
    picks = (w.cumsum(axis=1) > rng.random(n)[:, None]).argmax(axis=1)
    _, nu, _ = measure.arrays()
    rows = np.arange(n)
    y = g[rows, picks] + np.sqrt(nu[picks]) * rng.standard_normal(n)
    return x, y


def tv_distance(m1: MixingMeasure, m2: MixingMeasure, x_samples: int = 64,
                n_y: int = 1201, seed: int = 0, norm_tol: float = 1e-3) -> float:
    """Monte Carlo E_x of (1/2) integral |p1(y|x) - p2(y|x)| dy.

    The y-grid spans all expert outputs on the sampled x plus 8 times the
    largest standard deviation on each side. Each density's own trapezoid
    integral must be within ``norm_tol`` of 1, otherwise the grid is judged
    too coarse and a ResolutionError is raised.
    """
    if m1.d_in != m2.d_in:
        raise ValueError("measures disagree on input dimension")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, (x_samples, m1.d_in))

    g1, g2 = expert_outputs(m1, x), expert_outputs(m2, x)
    _, nu1, _ = m1.arrays()
    _, nu2, _ = m2.arrays()
    pad = 8.0 * np.sqrt(max(nu1.max(), nu2.max()))
    lo = min(g1.min(), g2.min()) - pad
    hi = max(g1.max(), g2.max()) + pad
    y_grid = np.linspace(lo, hi, n_y)

    p1 = _density_on_grid(m1, x, y_grid)
    p2 = _density_on_grid(m2, x, y_grid)
    z1 = np.trapezoid(p1, y_grid, axis=1)
    z2 = np.trapezoid(p2, y_grid, axis=1)
    worst = max(np.abs(z1 - 1.0).max(), np.abs(z2 - 1.0).max())
    if worst > norm_tol:
        raise ResolutionError(
            f"density normalization off by {worst:.2e} on the y-grid; refine n_y"
        )
    per_x = 0.5 * np.trapezoid(np.abs(p1 - p2), y_grid, axis=1)
    return float(per_x.mean())
