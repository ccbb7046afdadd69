"""Routing-comparison metrics over expert-assignment tables.

An AssignmentTable snapshots, for every (token, layer) pair of an evaluation
pass, the K expert indices a routing policy selected. Comparing two tables
gives the expert change rate (how much of the selection differs) and level
learning (how much overlaps). The two are complementary by construction:
ECR is implemented as 1 - matched_fraction so that ECR + normalized level
learning is exactly 1.0 in float arithmetic, not just mathematically.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AssignmentTable",
    "expert_change_rate",
    "level_learning",
    "selection_entropy",
    "weight_entropy",
    "write_assignment_table",
    "read_assignment_table",
]

SCHEMA_VERSION = 1


@dataclass
class AssignmentTable:
    """indices: (n_tokens, n_layers, K) int array of selected expert ids.
    ``fingerprint`` identifies the evaluation dataset so cross-dataset
    comparisons fail loudly instead of silently measuring noise."""

    indices: np.ndarray
    fingerprint: str = ""
    checkpoint_step: int = -1
    routing: str = "router"

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 3:
            raise ValueError("indices must be (n_tokens, n_layers, K)")
        t, l, k = self.indices.shape
        flat = self.indices.reshape(t * l, k)
        if k > 1 and any(len(set(row)) != k for row in flat):
            raise ValueError("selected expert ids must be distinct per (token, layer)")

    @property
    def shape(self):
        return self.indices.shape


def _check_comparable(a: AssignmentTable, b: AssignmentTable):
    if a.indices.shape != b.indices.shape:
        raise ValueError(f"table shapes differ: {a.indices.shape} vs {b.indices.shape}")
    if a.fingerprint and b.fingerprint and a.fingerprint != b.fingerprint:
        raise ValueError("tables were computed on different datasets")


def _matched_fraction(a: AssignmentTable, b: AssignmentTable) -> tuple[int, int]:
    """(sum over pairs of |set(a) cap set(b)|, K * number of pairs)."""
    _check_comparable(a, b)
    ai, bi = a.indices, b.indices
    t, l, k = ai.shape
    inter = (ai[..., :, None] == bi[..., None, :]).any(axis=-1).sum(axis=-1)
    return int(inter.sum()), t * l * k


def expert_change_rate(a: AssignmentTable, b: AssignmentTable) -> float:
    """Mean fraction of the K selections that differ between the tables.

    Equals sum over (token, layer) of (K - |intersection|) / (K * pairs).
    Computed as 1 - matched_fraction: with q = fl(matched/total), the float
    sum (1 - q) + q rounds back to exactly 1.0, which keeps the documented
    complement identity with normalized level learning exact.
    """
    matched, total = _matched_fraction(a, b)
    return 1.0 - matched / total


def level_learning(a: AssignmentTable, b: AssignmentTable) -> tuple[int, float]:
    """(raw overlap count, normalized overlap fraction) between two tables."""
    matched, total = _matched_fraction(a, b)
    return matched, matched / total


def selection_entropy(table: AssignmentTable) -> np.ndarray:
    """Per-layer Shannon entropy (bits) of the empirical distribution of
    selected expert indices, pooled over tokens and slots."""
    t, l, k = table.indices.shape
    out = np.zeros(l)
    for layer in range(l):
        counts = np.bincount(table.indices[:, layer, :].reshape(-1))
        p = counts[counts > 0] / (t * k)
        out[layer] = float(-(p * np.log2(p)).sum())
    return out


def weight_entropy(weights: np.ndarray) -> float:
    """Mean per-token entropy (bits) of routing weight vectors (T, K).
    Zero weights contribute zero; rows must be nonnegative."""
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if np.any(w < 0):
        raise ValueError("routing weights must be nonnegative")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, w * np.log2(w), 0.0)
    return float(-terms.sum(axis=1).mean())


# ---------------------------------------------------------------------------
# CSV interchange (cmd_eval writes, cmd_metrics reads)


def write_assignment_table(table: AssignmentTable, path) -> None:
    t, l, k = table.indices.shape
    buf = io.StringIO()
    buf.write(f"# schema_version={SCHEMA_VERSION}\n")
    buf.write(f"# fingerprint={table.fingerprint}\n")
    buf.write(f"# checkpoint_step={table.checkpoint_step}\n")
    buf.write(f"# routing={table.routing}\n")
    buf.write(f"# n_tokens={t} n_layers={l} k={k}\n")
    buf.write("token,layer," + ",".join(f"slot{i}" for i in range(k)) + "\n")
    for tok in range(t):
        for layer in range(l):
            slots = ",".join(str(int(v)) for v in table.indices[tok, layer])
            buf.write(f"{tok},{layer},{slots}\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_assignment_table(path) -> AssignmentTable:
    meta = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for part in line[1:].split():
                    if "=" in part:
                        key, val = part.split("=", 1)
                        meta[key] = val
                continue
            if line.startswith("token,"):
                continue
            rows.append([int(v) for v in line.split(",")])
    if meta.get("schema_version") != str(SCHEMA_VERSION):
        raise ValueError(f"unsupported table schema: {meta.get('schema_version')!r}")
    t, l, k = int(meta["n_tokens"]), int(meta["n_layers"]), int(meta["k"])
    indices = np.zeros((t, l, k), dtype=np.int64)
    for row in rows:
        indices[row[0], row[1]] = row[2:]
    return AssignmentTable(
        indices=indices,
        fingerprint=meta.get("fingerprint", ""),
        checkpoint_step=int(meta.get("checkpoint_step", -1)),
        routing=meta.get("routing", "router"),
    )
