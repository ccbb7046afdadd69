"""Synthetic character corpus driven by latent Markov sources.

A corpus is one long token stream built from segments. Each segment picks a
latent source uniformly at random; each source is a first-order Markov chain
over the shared vocabulary, biased toward its own contiguous token block
(with a uniform leak so every chain is irreducible). The next segment keeps
the current token as context, so bigram statistics are those of a segment-
mixed chain. Next-token prediction on this stream rewards expert
specialization: each source's block asks for different transition tables.

Tokens export as little-endian uint32 plus a JSON manifest carrying the
generating spec and a sha256 fingerprint; source labels ride along in a
second binary file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

__all__ = [
    "DataSpec",
    "Corpus",
    "build_transition_matrices",
    "generate_corpus",
    "split_corpus",
    "batch_iterator",
    "write_corpus",
    "read_corpus",
]

SCHEMA_VERSION = 1


@dataclass
class DataSpec:
    vocab_size: int = 24
    n_sources: int = 4
    n_tokens: int = 200_000
    segment_min: int = 8
    segment_max: int = 32
    block_weight: float = 0.9  # probability mass a source keeps in its block
    source_seed: int = 7  # fixes the chains themselves (the process)
    seed: int = 0  # fixes the simulated sample from that process

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if not (1 <= self.n_sources <= self.vocab_size):
            raise ValueError("need 1 <= n_sources <= vocab_size")
        if not (1 <= self.segment_min <= self.segment_max):
            raise ValueError("need 1 <= segment_min <= segment_max")
        if not (0.0 < self.block_weight < 1.0):
            raise ValueError("block_weight must lie in (0, 1)")
        if self.n_tokens < 2:
            raise ValueError("n_tokens must be >= 2")


@dataclass
class Corpus:
    spec: DataSpec
    tokens: np.ndarray  # (n,) int64 in [0, vocab_size)
    sources: np.ndarray  # (n,) int64 label of the chain that emitted each token

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.tokens, dtype="<u4").tobytes())
        return h.hexdigest()

    def __len__(self):
        return int(self.tokens.shape[0])


def build_transition_matrices(spec: DataSpec) -> np.ndarray:
    """(n_sources, V, V) row-stochastic matrices, deterministic given spec.

    Source m spreads ``block_weight`` over its own contiguous block with
    random proportions drawn from ``source_seed`` (the corpus ``seed`` only
    drives the simulation, so corpora with different seeds sample the same
    process) and leaks the rest uniformly over the whole vocabulary, so
    every chain is irreducible and aperiodic.
    """
    rng = np.random.default_rng(spec.source_seed)
    v, m = spec.vocab_size, spec.n_sources
    bounds = np.linspace(0, v, m + 1).astype(int)
    mats = np.full((m, v, v), (1.0 - spec.block_weight) / v)
    for src in range(m):
        lo, hi = bounds[src], bounds[src + 1]
        width = hi - lo
        in_block = rng.random((v, width)) + 0.25  # bounded away from zero
        in_block /= in_block.sum(axis=1, keepdims=True)
        mats[src, :, lo:hi] += spec.block_weight * in_block
    return mats


def generate_corpus(spec: DataSpec) -> Corpus:
    """Simulate the segment-mixed chain; one rng drives everything."""
    rng = np.random.default_rng(spec.seed)
    mats = build_transition_matrices(spec)
    cum = np.cumsum(mats, axis=2)
    cum[:, :, -1] = 1.0  # guard against rounding in searchsorted

    n = spec.n_tokens
    tokens = np.empty(n, dtype=np.int64)
    sources = np.empty(n, dtype=np.int64)
    current = int(rng.integers(spec.vocab_size))
    pos = 0
    while pos < n:
        src = int(rng.integers(spec.n_sources))
        seg_len = int(rng.integers(spec.segment_min, spec.segment_max + 1))
        seg_len = min(seg_len, n - pos)
        draws = rng.random(seg_len)
        for i in range(seg_len):
            current = int(np.searchsorted(cum[src, current], draws[i], side="right"))
            tokens[pos] = current
            sources[pos] = src
            pos += 1
    return Corpus(spec=spec, tokens=tokens, sources=sources)


def split_corpus(corpus: Corpus, val_frac: float):
    """Head/tail split into (train, validation) views of the same stream."""
    if not (0.0 < val_frac < 1.0):
        raise ValueError("val_frac must lie in (0, 1)")
    n = len(corpus)
    cut = int(round(n * (1.0 - val_frac)))
    if cut < 2 or n - cut < 2:
        raise ValueError("split leaves an empty side")
    head = Corpus(corpus.spec, corpus.tokens[:cut], corpus.sources[:cut])
    tail = Corpus(corpus.spec, corpus.tokens[cut:], corpus.sources[cut:])
    return head, tail


def window_starts(n_tokens: int, context_len: int) -> np.ndarray:
    """Non-overlapping window origins; the target shift needs one spare token."""
    if n_tokens < context_len + 1:
        raise ValueError("corpus shorter than one context window")
    return np.arange(0, n_tokens - context_len, context_len)


def batch_iterator(corpus: Corpus, batch_size: int, context_len: int, seed: int):
    """Endless (inputs, targets) batches of shape (batch_size, context_len).

    Windows tile the stream with stride = context_len. Each epoch visits
    every window at least once: the order reshuffles per epoch, and a ragged
    final batch tops up from the start of the shuffled order.
    """
    starts = window_starts(len(corpus), context_len)
    tokens = corpus.tokens
    epoch = 0
    while True:
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
        order = rng.permutation(starts)
        n_batches = int(np.ceil(order.size / batch_size))
        for b in range(n_batches):
            chunk = order[b * batch_size:(b + 1) * batch_size]
            if chunk.size < batch_size:  # wrap to keep shapes static
                chunk = np.concatenate([chunk, order[:batch_size - chunk.size]])
            offsets = chunk[:, None] + np.arange(context_len)[None, :]
            yield tokens[offsets], tokens[offsets + 1]
        epoch += 1


# ---------------------------------------------------------------------------
# export


def write_corpus(corpus: Corpus, path) -> None:
    """Write <path>.bin (uint32 LE tokens), <path>.src.bin (uint16 LE labels)
    and <path>.json (manifest)."""
    path = Path(path)
    tok_bytes = np.ascontiguousarray(corpus.tokens, dtype="<u4").tobytes()
    src_bytes = np.ascontiguousarray(corpus.sources, dtype="<u2").tobytes()
    path.with_suffix(".bin").write_bytes(tok_bytes)
    path.with_suffix(".src.bin").write_bytes(src_bytes)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "spec": asdict(corpus.spec),
        "n_tokens": len(corpus),
        "fingerprint": corpus.fingerprint,
        "token_dtype": "<u4",
        "source_dtype": "<u2",
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_corpus(path) -> Corpus:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported corpus schema: {manifest.get('schema_version')!r}")
    spec = DataSpec(**manifest["spec"])
    tokens = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<u4").astype(np.int64)
    sources = np.frombuffer(path.with_suffix(".src.bin").read_bytes(), dtype="<u2").astype(np.int64)
    corpus = Corpus(spec=spec, tokens=tokens, sources=sources)
    if corpus.fingerprint != manifest["fingerprint"]:
        raise ValueError("token fingerprint mismatch; corpus file corrupted")
    if len(corpus) != manifest["n_tokens"]:
        raise ValueError("token count mismatch")
    return corpus
