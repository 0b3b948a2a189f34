"""Session datasets: file ingestion, preprocessing, snapshots and synthetic data.

Sequences are stored as one ``[n, t]`` int array, left-padded with item id 0.
The session file format is UTF-8 text with one session per line of
space-separated item ids (>= 1) in chronological order.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class SessionDataset:
    sequences: np.ndarray  # [n, t] int64, left-padded with 0
    vocab_size: int
    max_len: int

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.int64).reshape(-1, self.max_len)

    def __len__(self) -> int:
        return self.sequences.shape[0]

    def subset(self, index) -> "SessionDataset":
        return SessionDataset(self.sequences[index], self.vocab_size, self.max_len)

    def validate(self) -> None:
        seqs = self.sequences
        if seqs.size and (seqs.min() < 0 or seqs.max() > self.vocab_size):
            raise DataError(f"item ids outside [0, {self.vocab_size}]")
        nonpad = seqs != 0
        # padding must be a contiguous prefix: once an item appears, no zeros follow
        started = np.cumsum(nonpad, axis=1) > 0
        if np.any(started & ~nonpad):
            raise DataError("padding appears after the first item in a sequence")
        if np.any(nonpad.sum(axis=1) < 2):
            raise DataError("every sequence needs at least 2 items")


def pad_left(items: Sequence[int], max_len: int) -> list[int]:
    return [0] * (max_len - len(items)) + list(items)


def chunk_session(items: Sequence[int], max_len: int, overlap: int = 0) -> list[list[int]]:
    """Split into consecutive windows of at most ``max_len`` items, starting from the front.

    ``overlap`` items are shared between neighbouring windows (0 = disjoint).
    """
    if not 0 <= overlap < max_len:
        raise ValueError(f"overlap must be in [0, {max_len - 1}], got {overlap}")
    if len(items) <= max_len:
        return [list(items)]
    stride = max_len - overlap
    chunks = []
    start = 0
    while True:
        chunks.append(list(items[start:start + max_len]))
        if start + max_len >= len(items):
            break
        start += stride
    return chunks


def sequences_from_sessions(sessions: Iterable[Sequence[int]], max_len: int,
                            overlap: int = 0, line_offset: int = 1) -> np.ndarray:
    rows = []
    for lineno, items in enumerate(sessions, start=line_offset):
        for chunk in chunk_session(items, max_len, overlap):
            if len(chunk) < 2:
                raise DataError(f"line {lineno}: a sub-sequence has fewer than 2 items")
            rows.append(pad_left(chunk, max_len))
    return np.array(rows, dtype=np.int64).reshape(-1, max_len)


def parse_session_line(line: str, lineno: int) -> list[int]:
    items = []
    for tok in line.split():
        try:
            value = int(tok)
        except ValueError:
            raise DataError(f"line {lineno}: non-integer token {tok!r}") from None
        if value <= 0:
            raise DataError(f"line {lineno}: item id must be >= 1, got {value}")
        items.append(value)
    return items


def read_sessions(path) -> list[list[int]]:
    with open(path, encoding="utf-8") as fh:
        return [parse_session_line(line, n) for n, line in enumerate(fh, start=1) if line.strip()]


def load_sessions(path, max_len: int, overlap: int = 0,
                  vocab_size: int | None = None) -> SessionDataset:
    """Read a session file, chunk long sessions and left-pad everything to ``max_len``."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            items = parse_session_line(line, lineno)
            if len(items) < 2:
                raise DataError(f"line {lineno}: session has fewer than 2 items")
            rows.append(sequences_from_sessions([items], max_len, overlap, line_offset=lineno))
    seqs = np.concatenate(rows) if rows else np.zeros((0, max_len), dtype=np.int64)
    observed = int(seqs.max()) if seqs.size else 0
    if vocab_size is None:
        vocab_size = observed
    elif observed > vocab_size:
        raise DataError(f"item id {observed} exceeds vocab_size {vocab_size}")
    return SessionDataset(seqs, vocab_size, max_len)


def strip_padding(row: np.ndarray) -> list[int]:
    return [int(v) for v in row if v != 0]


def write_sessions(dataset: SessionDataset, path) -> None:
    lines = (" ".join(map(str, strip_padding(row))) for row in dataset.sequences)
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def filter_min_counts(sessions: Mapping[object, Sequence[int]], min_item_users: int = 10,
                      min_user_items: int = 5) -> dict[object, list[int]]:
    """Drop rare items and short users repeatedly until nothing changes."""
    current = {u: list(items) for u, items in sessions.items()}
    while True:
        item_users = Counter(i for items in current.values() for i in set(items))
        keep_items = {i for i, c in item_users.items() if c >= min_item_users}
        filtered = {u: [i for i in items if i in keep_items] for u, items in current.items()}
        filtered = {u: items for u, items in filtered.items() if len(items) >= min_user_items}
        if filtered == current:
            break
        current = filtered
    if not current:
        log.warning("filter_min_counts removed every user")
    return current


def split_train_test(dataset: SessionDataset, ratio: float = 0.8,
                     seed: int = 0) -> tuple[SessionDataset, SessionDataset]:
    """Random sequence-level split; train gets ``round(ratio * n)`` sequences."""
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratio * n))
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))


@dataclass(frozen=True)
class SnapshotSpec:
    fractions: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        if not fr or any(not 0 < f <= 1 for f in fr) or list(fr) != sorted(fr):
            raise ValueError(f"fractions must be ascending in (0, 1], got {fr}")


def snapshot(train: SessionDataset, spec: SnapshotSpec, i: int) -> SessionDataset:
    """The first ``ceil(fraction_i * n)`` sequences of one fixed seeded permutation."""
    if not 0 <= i < len(spec.fractions):
        raise IndexError(f"snapshot index {i} out of range for {len(spec.fractions)} fractions")
    n = len(train)
    perm = np.random.default_rng(spec.seed).permutation(n)
    size = math.ceil(spec.fractions[i] * n - 1e-9)
    return train.subset(perm[:size])


def snapshots(train: SessionDataset, spec: SnapshotSpec) -> list[SessionDataset]:
    return [snapshot(train, spec, i) for i in range(len(spec.fractions))]


# --- synthetic data -------------------------------------------------------------

def markov_transitions(num_items: int, concentration: int, seed: int,
                       dirichlet: float | None = 1.0) -> np.ndarray:
    """Row-stochastic ``[V+1, V+1]`` matrix; each item has ``concentration`` successors.

    ``dirichlet=None`` gives equal weight to every successor. Row/column 0 stay zero.
    """
    rng = np.random.default_rng(seed)
    V = num_items
    c = min(concentration, V)
    trans = np.zeros((V + 1, V + 1))
    for item in range(1, V + 1):
        succ = rng.choice(V, size=c, replace=False) + 1
        weights = np.full(c, 1.0 / c) if dirichlet is None else rng.dirichlet(np.full(c, dirichlet))
        trans[item, succ] = weights
    return trans


def gen_markov(num_items: int, num_sessions: int, max_len: int, order: int = 1,
               concentration: int = 3, seed: int = 0, dirichlet: float | None = 1.0,
               min_len: int = 2) -> SessionDataset:
    """Sample sessions from a random sparse first-order Markov chain.

    Start items are uniform; session lengths are uniform in ``[min_len, max_len]``.
    """
    if num_items < 10:
        raise ValueError(f"need at least 10 items, got {num_items}")
    if order != 1:
        raise ValueError("only first-order chains are supported")
    if not 2 <= min_len <= max_len:
        raise ValueError(f"need 2 <= min_len <= max_len, got {min_len}, {max_len}")
    trans = markov_transitions(num_items, concentration, seed, dirichlet)
    cdf = np.cumsum(trans, axis=1)
    cdf[:, -1] = 1.0
    rng = np.random.default_rng([seed, 1])
    lengths = rng.integers(min_len, max_len + 1, size=num_sessions)
    seqs = np.zeros((num_sessions, max_len), dtype=np.int64)
    cur = rng.integers(1, num_items + 1, size=num_sessions)
    seqs[np.arange(num_sessions), max_len - lengths] = cur
    for pos in range(1, max_len):
        active = lengths > pos
        if not active.any():
            break
        u = rng.random(num_sessions)
        nxt = (cdf[cur] < u[:, None]).sum(axis=1)
        cur = np.where(active, nxt, cur)
        rows = np.nonzero(active)[0]
        seqs[rows, max_len - lengths[rows] + pos] = cur[rows]
    return SessionDataset(seqs, num_items, max_len)


# --- transfer pairs ---------------------------------------------------------------

@dataclass
class TransferDataset:
    """Source-domain contexts paired with one target-domain item each."""

    contexts: np.ndarray  # [n, t] left-padded source ids
    targets: np.ndarray   # [n] target ids in 1..target_vocab
    source_vocab: int
    target_vocab: int

    def __len__(self) -> int:
        return self.contexts.shape[0]

    def subset(self, index) -> "TransferDataset":
        return TransferDataset(self.contexts[index], self.targets[index],
                               self.source_vocab, self.target_vocab)


def load_pairs(path, max_len: int, source_vocab: int | None = None,
               target_vocab: int | None = None) -> TransferDataset:
    """Pairs file: session lines whose last id is the target-domain item.

    Contexts longer than ``max_len`` keep their most recent items.
    """
    contexts, targets = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            items = parse_session_line(line, lineno)
            if len(items) < 2:
                raise DataError(f"line {lineno}: need a context and a target")
            contexts.append(pad_left(items[:-1][-max_len:], max_len))
            targets.append(items[-1])
    ctx = np.array(contexts, dtype=np.int64).reshape(-1, max_len)
    tgt = np.array(targets, dtype=np.int64)
    sv = int(ctx.max()) if ctx.size else 0
    tv = int(tgt.max()) if tgt.size else 0
    if source_vocab is not None and sv > source_vocab:
        raise DataError(f"source id {sv} exceeds source vocab {source_vocab}")
    if target_vocab is not None and tv > target_vocab:
        raise DataError(f"target id {tv} exceeds target vocab {target_vocab}")
    return TransferDataset(ctx, tgt, source_vocab or sv, target_vocab or tv)


def write_pairs(dataset: TransferDataset, path) -> None:
    lines = []
    for ctx, tgt in zip(dataset.contexts, dataset.targets):
        lines.append(" ".join(map(str, strip_padding(ctx) + [int(tgt)])) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def gen_linked(source: SessionDataset, target_vocab: int, seed: int = 0,
               noise: float = 0.0) -> TransferDataset:
    """Target item for each source sequence, determined by the item that follows it.

    Uses the sequence's last item as the hidden successor and maps it to a target
    item through a fixed random assignment; the context is everything before it.
    """
    rng = np.random.default_rng(seed)
    assign = rng.integers(1, target_vocab + 1, size=source.vocab_size + 1)
    seqs = source.sequences
    contexts = np.concatenate([np.zeros((len(seqs), 1), np.int64), seqs[:, :-1]], axis=1)
    targets = assign[seqs[:, -1]]
    if noise > 0:
        flip = rng.random(len(targets)) < noise
        targets = np.where(flip, rng.integers(1, target_vocab + 1, size=len(targets)), targets)
    return TransferDataset(contexts, targets, source.vocab_size, target_vocab)
