"""Last-item ranking evaluation: MRR@N, HR@N, NDCG@N and speedup accounting."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import kernels as K
from .data import SessionDataset, TransferDataset
from .model import ModelParams, encode, project

EVAL_BATCH = 512


@dataclass
class Metrics:
    mrr: float
    hr: float
    ndcg: float
    n: int
    count: int

    def format(self) -> str:
        return f"n={self.n} mrr={self.mrr:.6f} hr={self.hr:.6f} ndcg={self.ndcg:.6f} count={self.count}"


def last_item_pairs(dataset: SessionDataset) -> tuple[np.ndarray, np.ndarray]:
    """Context (sequence minus its last item, re-padded on the left) and target."""
    seqs = dataset.sequences
    contexts = np.concatenate([np.zeros((len(seqs), 1), seqs.dtype), seqs[:, :-1]], axis=1)
    return contexts, seqs[:, -1].copy()


def eval_pairs(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, TransferDataset):
        return data.contexts, data.targets
    return last_item_pairs(data)


def final_logits(params: ModelParams, contexts: np.ndarray,
                 batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Logits at the last position for each context row, ``[n, V+1]``."""
    out = []
    for start in range(0, len(contexts), batch_size):
        h, _ = encode(params, contexts[start:start + batch_size])
        out.append(project(params, h[:, -1]))
    if not out:
        return np.zeros((0, params.config.vocab_size + 1), dtype=params.dtype)
    return np.concatenate(out)


def ranks_from_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target among ids 1..V; ties count against the target."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    rows = np.arange(len(targets))
    target_logit = logits[rows, targets][:, None]
    # counts the target itself, which supplies the +1; padding id 0 is never a candidate
    return (logits[:, 1:] >= target_logit).sum(axis=1).astype(np.int64)


def rank_items(params: ModelParams, contexts: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return ranks_from_logits(final_logits(params, contexts), targets)


def rank_last_item(params: ModelParams, dataset) -> np.ndarray:
    return rank_items(params, *eval_pairs(dataset))


def ndcg_gain(rank: int) -> float:
    return 1.0 / math.log2(rank + 1)


def metrics_at(ranks, n: int) -> Metrics:
    """Aggregate 1-based ranks at cutoff ``n``.

    Sums are exact rationals over the per-rank float gains, so the result is
    correctly rounded and independent of the order of ``ranks``.
    """
    ranks = np.asarray(ranks, dtype=np.int64).ravel()
    if ranks.size == 0:
        raise ValueError("no ranks to aggregate")
    if ranks.min() < 1:
        raise ValueError("ranks are 1-based")
    counts = np.bincount(ranks[ranks <= n], minlength=n + 1)
    total = ranks.size
    hits = int(counts.sum())
    mrr = sum(Fraction(int(c), r) for r, c in enumerate(counts) if r and c)
    ndcg = sum(int(c) * Fraction(ndcg_gain(r)) for r, c in enumerate(counts) if r and c)
    return Metrics(float(Fraction(mrr) / total), float(Fraction(hits, total)),
                   float(Fraction(ndcg) / total), n, total)


def evaluate(params: ModelParams, data, n: int = 5) -> Metrics:
    return metrics_at(rank_last_item(params, data), n)


def eval_loss(params: ModelParams, data, batch_size: int = EVAL_BATCH) -> float:
    """Mean next-item cross-entropy over every supervised position of ``data``."""
    from .training import make_batch  # deferred: training imports this module

    total, count = 0.0, 0
    rows = np.arange(len(data))
    for start in range(0, len(rows), batch_size):
        inputs, targets, mask = make_batch(data, rows[start:start + batch_size])
        h, _ = encode(params, inputs)
        loss, _ = K.softmax_cross_entropy(project(params, h), targets, mask)
        c = int(mask.sum())
        total += loss * c
        count += c
    return total / count


# --- speedup --------------------------------------------------------------------

@dataclass
class Speedup:
    iterations: float | None
    wall: float | None
    stacked_iterations: int | None
    reference_iterations: int | None

    @property
    def reachable(self) -> bool:
        return self.iterations is not None

    def format(self) -> str:
        if not self.reachable:
            return "speedup=unreachable"
        wall = "n/a" if self.wall is None else f"{self.wall:.3f}"
        return f"speedup={self.iterations:.3f} wall_speedup={wall}"


def first_reaching(history, target: float, metric: str = "mrr5"):
    """First record whose ``metric`` is at least ``target``, or None."""
    for rec in history:
        if getattr(rec, metric) >= target:
            return rec
    return None


def speedup(history_stacked, history_reference, target: float, metric: str = "mrr5") -> Speedup:
    """Reference iterations (and wall time) to reach ``target`` over the stacked run's."""
    a = first_reaching(history_stacked, target, metric)
    b = first_reaching(history_reference, target, metric)
    if a is None or b is None:
        return Speedup(None, None, a.iteration if a else None, b.iteration if b else None)
    if a.iteration == 0:
        ratio = float("inf") if b.iteration > 0 else 1.0
    else:
        ratio = b.iteration / a.iteration
    if a.wall_ms == 0:
        wall = float("inf") if b.wall_ms > 0 else 1.0
    else:
        wall = b.wall_ms / a.wall_ms
    return Speedup(ratio, wall, a.iteration, b.iteration)
