"""Competition-step scheduling.

Each layer gets an independent Bernoulli(omega) draw per training step,
subject to (a) a warm-up prefix with no competition at all and (b) a global
cap: at any step, at most ``a_max`` layers may run a competition forward.

The cap is enforced layer by layer, in index order. For layer l only the
layers before it count toward the budget (Q_prev, the column sums of the
already-capped rows above). A violating activation moves to the earliest
later step with spare budget and a free slot in its own row, wrapping around
to the start of the schedulable region; if no slot exists it is dropped and
counted. Because each layer is validated against the final state of all
layers above it, post-cap column sums can never exceed ``a_max``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

__all__ = [
    "ScheduleSpec",
    "ScheduleResult",
    "sample_layer_schedule",
    "enforce_global_cap",
    "generate_schedule",
    "schedule_to_text",
    "schedule_from_text",
]

SCHEMA_VERSION = 1


@dataclass
class ScheduleSpec:
    n_layers: int
    horizon: int
    omega: float = 0.07
    a_max: int = 9
    warmup_frac: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1 or self.horizon < 1:
            raise ValueError("need at least one layer and one step")
        if not (0.0 <= self.omega <= 1.0):
            raise ValueError("omega must lie in [0, 1]")
        if self.a_max < 1:
            raise ValueError("a_max must be >= 1")
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ValueError("warmup_frac must lie in [0, 1)")

    @property
    def warmup_steps(self) -> int:
        # competition is off for every step t < warmup_frac * horizon
        return int(math.ceil(self.warmup_frac * self.horizon))


@dataclass
class ScheduleResult:
    spec: ScheduleSpec
    matrix: np.ndarray  # (n_layers, horizon) int8 activation matrix
    dropped: int

    def active_fraction(self) -> float:
        return float(self.matrix.mean())

    def column_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=0)


def sample_layer_schedule(omega: float, horizon: int, rng) -> np.ndarray:
    """I.i.d. Bernoulli(omega) activations for one layer; rng is a Generator
    or a seed."""
    if not (0.0 <= omega <= 1.0):
        raise ValueError("omega must lie in [0, 1]")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return (rng.random(horizon) < omega).astype(np.int8)


def enforce_global_cap(raw: np.ndarray, a_max: int, t_min: int = 0):
    """Apply the layer-ordered global cap to a raw (L, T) activation matrix.

    Returns (capped matrix, dropped count). Moves stay inside [t_min, T):
    callers pass the warm-up length so deferrals cannot re-enter the
    warm-up region.
    """
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ValueError("activation matrix must be 2-D")
    if a_max < 1:
        raise ValueError("a_max must be >= 1")
    n_layers, horizon = raw.shape
    capped = np.zeros_like(raw, dtype=np.int8)
    q_prev = np.zeros(horizon, dtype=np.int64)  # column sums of rows above
    dropped = 0
    for layer in range(n_layers):
        row = raw[layer].astype(np.int8).copy()
        for t in np.nonzero(raw[layer])[0]:
            if q_prev[t] + 1 <= a_max:
                continue
            row[t] = 0
            # earliest later slot with budget and a free cell, wrapping around
            candidates = np.r_[np.arange(t + 1, horizon), np.arange(t_min, t)]
            placed = False
            for t_new in candidates:
                if row[t_new] == 0 and q_prev[t_new] + 1 <= a_max:
                    row[t_new] = 1
                    placed = True
                    break
            if not placed:
                dropped += 1
        capped[layer] = row
        q_prev += row
    return capped, dropped


def generate_schedule(spec: ScheduleSpec) -> ScheduleResult:
    """Sample all layers (zeros during warm-up), then enforce the cap."""
    rng = np.random.default_rng(spec.seed)
    warm = spec.warmup_steps
    raw = np.zeros((spec.n_layers, spec.horizon), dtype=np.int8)
    for layer in range(spec.n_layers):
        raw[layer, warm:] = sample_layer_schedule(spec.omega, spec.horizon - warm, rng)
    capped, dropped = enforce_global_cap(raw, spec.a_max, t_min=warm)
    return ScheduleResult(spec=spec, matrix=capped, dropped=dropped)


def schedule_to_text(result: ScheduleResult) -> str:
    """Structured text form: metadata plus one 0/1 row string per layer."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "spec": asdict(result.spec),
        "dropped": result.dropped,
        "rows": ["".join(str(int(v)) for v in row) for row in result.matrix],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def schedule_from_text(text: str) -> ScheduleResult:
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schedule schema: {doc.get('schema_version')!r}")
    spec = ScheduleSpec(**doc["spec"])
    matrix = np.array([[int(c) for c in row] for row in doc["rows"]], dtype=np.int8)
    if matrix.shape != (spec.n_layers, spec.horizon):
        raise ValueError("schedule row shapes do not match spec")
    return ScheduleResult(spec=spec, matrix=matrix, dropped=int(doc["dropped"]))
