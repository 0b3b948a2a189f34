"""Depth-growth transforms: copy trained blocks into a deeper model.

``adjacent`` places each copy right after its original, ``cross`` appends a
copy of the whole block stack on top. ``random_top`` and ``embed_only`` are
ablation baselines that keep fewer trained parameters. Every mode reuses the
embedding and softmax tensors unchanged, and every result is an independent
deep copy of the source.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import BLOCK_TENSORS, ModelParams, init_block

MODES = ("adjacent", "cross", "random_top", "embed_only")


@dataclass(frozen=True)
class StackPlan:
    mode: str
    added_blocks: int
    redilate: bool = False

    def __post_init__(self):
        mode = self.mode.replace("-", "_")
        object.__setattr__(self, "mode", mode)
        if mode not in MODES:
            raise ValueError(f"unknown stacking mode {self.mode!r}; expected one of {MODES}")
        if self.added_blocks < 1:
            raise ValueError(f"added_blocks must be positive, got {self.added_blocks}")


def source_indices(depth: int, mode: str, m: int) -> list[int]:
    """Source block index for every block of the grown model (adjacent/cross only)."""
    if not 1 <= m <= depth:
        raise ValueError(f"can only add 1..{depth} copied blocks, got {m}")
    if mode == "adjacent":
        # the top m blocks are duplicated in place
        keep = list(range(depth - m))
        return keep + [i for i in range(depth - m, depth) for _ in (0, 1)]
    if mode == "cross":
        return list(range(depth)) + list(range(m))
    raise ValueError(f"mode {mode!r} has no copy pattern")


def _finish(src: ModelParams, blocks, redilate: bool) -> ModelParams:
    config = replace(src.config, num_blocks=len(blocks))
    if redilate:
        for i, block in enumerate(blocks):
            block.dilation = config.dilation_for(i)
    return ModelParams(src.embedding.copy(), blocks, src.softmax_w.copy(),
                       src.softmax_b.copy(), config)


def partial_stack(src: ModelParams, mode: str, m: int, redilate: bool = False) -> ModelParams:
    """Grow ``src`` by ``m`` copied blocks (``1 <= m <= L``)."""
    idx = source_indices(len(src.blocks), mode, m)
    return _finish(src, [src.blocks[i].copy() for i in idx], redilate)


def adjacent_stack(src: ModelParams, redilate: bool = False) -> ModelParams:
    """``[B1, B1, B2, B2, ..., BL, BL]``."""
    return partial_stack(src, "adjacent", len(src.blocks), redilate)


def cross_stack(src: ModelParams, redilate: bool = False) -> ModelParams:
    """``[B1, ..., BL, B1, ..., BL]``."""
    return partial_stack(src, "cross", len(src.blocks), redilate)


def random_top_stack(src: ModelParams, m: int, seed: int) -> ModelParams:
    """Keep the trained blocks and put ``m`` freshly initialized blocks on top."""
    if m < 1:
        raise ValueError(f"m must be positive, got {m}")
    rng = np.random.default_rng(seed)
    depth = len(src.blocks)
    new = [init_block(src.config, src.config.dilation_for(depth + j), rng, src.dtype)
           for j in range(m)]
    return _finish(src, [b.copy() for b in src.blocks] + new, redilate=False)


def embed_only_stack(src: ModelParams, new_depth: int, seed: int) -> ModelParams:
    """Keep only embedding and softmax; all ``new_depth`` blocks are fresh."""
    if new_depth < 1:
        raise ValueError(f"new_depth must be positive, got {new_depth}")
    rng = np.random.default_rng(seed)
    blocks = [init_block(src.config, src.config.dilation_for(i), rng, src.dtype)
              for i in range(new_depth)]
    return _finish(src, blocks, redilate=False)


def apply_plan(src: ModelParams, plan: StackPlan, seed: int = 0) -> ModelParams:
    if plan.mode in ("adjacent", "cross"):
        return partial_stack(src, plan.mode, plan.added_blocks, plan.redilate)
    if plan.mode == "random_top":
        return random_top_stack(src, plan.added_blocks, seed)
    return embed_only_stack(src, len(src.blocks) + plan.added_blocks, seed)


def doubling_plan(depth: int, mode: str, redilate: bool = False) -> StackPlan:
    return StackPlan(mode, depth, redilate)


# --- verification ---------------------------------------------------------------

@dataclass
class StackReport:
    plan: StackPlan
    mismatches: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def format(self) -> str:
        head = f"verify_stack mode={self.plan.mode} added={self.plan.added_blocks}: "
        head += "PASS" if self.ok else "FAIL"
        lines = [head]
        lines += [f"  mismatch {name}" for name in self.mismatches]
        lines += [f"  note {n}" for n in self.notes]
        return "\n".join(lines)


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def verify_stack(src: ModelParams, dst: ModelParams, plan: StackPlan) -> StackReport:
    """Bit-exact check that ``dst`` follows ``plan``'s copy pattern from ``src``."""
    report = StackReport(plan)
    depth = len(src.blocks)
    if len(dst.blocks) != depth + plan.added_blocks:
        report.mismatches.append("num_blocks")
        report.notes.append(f"expected {depth + plan.added_blocks} blocks, got {len(dst.blocks)}")
        return report
    for name in ("embedding", "softmax_w", "softmax_b"):
        if not _same(getattr(src, name), getattr(dst, name)):
            report.mismatches.append(name.replace("_", "."))

    def compare_block(i: int, j: int, check_dilation: bool = True):
        a, b = dst.blocks[i].tensors(), src.blocks[j].tensors()
        for t in BLOCK_TENSORS:
            if not _same(a[t], b[t]):
                report.mismatches.append(f"block{i}.{t}")
        if check_dilation and dst.blocks[i].dilation != src.blocks[j].dilation:
            report.mismatches.append(f"block{i}.dilation")

    def check_fresh(i: int):
        if dst.blocks[i].alpha != 0:
            report.mismatches.append(f"block{i}.alpha")

    if plan.mode in ("adjacent", "cross"):
        try:
            idx = source_indices(depth, plan.mode, plan.added_blocks)
        except ValueError as exc:
            report.mismatches.append("plan")
            report.notes.append(str(exc))
            return report
        for i, j in enumerate(idx):
            compare_block(i, j, check_dilation=not plan.redilate)
            if plan.redilate and dst.blocks[i].dilation != dst.config.dilation_for(i):
                report.mismatches.append(f"block{i}.dilation")
    elif plan.mode == "random_top":
        for i in range(depth):
            compare_block(i, i)
        for i in range(depth, len(dst.blocks)):
            check_fresh(i)
    else:
        for i in range(len(dst.blocks)):
            check_fresh(i)
        src_bytes = {t.tobytes() for b in src.blocks for t in b.tensors().values() if t.ndim == 3}
        for i, block in enumerate(dst.blocks):
            for t in ("conv1.w", "conv2.w"):
                if block.tensors()[t].tobytes() in src_bytes:
                    report.mismatches.append(f"block{i}.{t}")
                    report.notes.append(f"block{i}.{t} was copied from the source")
    return report
