"""Cosine similarity between residual-block output feature maps."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import SessionDataset
from .model import ModelParams, encode

log = logging.getLogger(__name__)


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # [L, L]
    num_sequences: int

    def format(self, precision: int = 6) -> str:
        n = self.values.shape[0]
        rows = [" ".join(f"{v:.{precision}f}" for v in row) for row in self.values]
        return "\n".join([str(n)] + rows) + "\n"

    @classmethod
    def parse(cls, text: str, num_sequences: int = 0) -> "SimilarityMatrix":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        n = int(lines[0])
        values = np.array([[float(v) for v in ln.split()] for ln in lines[1:n + 1]])
        if values.shape != (n, n):
            raise ValueError(f"expected a {n}x{n} matrix, got {values.shape}")
        return cls(values, num_sequences)


def sample_rows(n: int, num_sequences: int, seed: int) -> np.ndarray:
    """Sorted sample without replacement; everything when the request covers the set."""
    if num_sequences >= n:
        if num_sequences > n:
            log.warning("only %d sequences available, %d requested; using all", n, num_sequences)
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=num_sequences, replace=False))


def cosine_matrix(maps: list[np.ndarray]) -> np.ndarray:
    """Pairwise cosine similarity of flattened feature maps (fp64)."""
    flat = np.stack([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    norms = np.linalg.norm(flat, axis=1)
    L = len(maps)
    out = np.eye(L)
    for i in range(L):
        out[i, i] = flat[i] @ flat[i] / (norms[i] * norms[i])
        for j in range(i + 1, L):
            out[i, j] = out[j, i] = flat[i] @ flat[j] / (norms[i] * norms[j])
    return out


def block_similarity(params: ModelParams, dataset: SessionDataset, num_sequences: int = 100,
                     seed: int = 0) -> SimilarityMatrix:
    """Average over sampled sequences of the block-output cosine similarity matrix.

    Each block output is restricted to the sequence's non-padding positions and
    flattened over positions and channels before comparison.
    """
    if len(params.blocks) < 2:
        raise ValueError("need at least 2 blocks to compare")
    rows = sample_rows(len(dataset), num_sequences, seed)
    seqs = dataset.sequences[rows]
    _, hidden = encode(params, seqs, keep_hidden=True)
    total = np.zeros((len(params.blocks),) * 2)
    for s, seq in enumerate(seqs):
        keep = seq != 0
        total += cosine_matrix([h[s, keep] for h in hidden])
    return SimilarityMatrix(total / len(rows), len(rows))


def first_block_contrast(sim: SimilarityMatrix) -> tuple[float, float]:
    """(mean adjacent-pair similarity among blocks 2..L, mean similarity of block 1 with 2..L)."""
    v = sim.values
    L = v.shape[0]
    adjacent = np.mean([v[i, i + 1] for i in range(1, L - 1)]) if L > 2 else float("nan")
    first = float(np.mean(v[0, 1:]))
    return float(adjacent), first
