"""Dilated-convolution next-item model with learnable residual scales.

A model is an item embedding, an ordered list of residual blocks and a softmax
projection. Each block computes ``h + alpha * F(h)`` where ``F`` is two causal
dilated convolutions, each followed by layer norm and ReLU. ``alpha`` starts
at zero so a fresh block is the identity.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels as K

BLOCK_TENSORS = (
    "conv1.w", "conv1.b", "ln1.gamma", "ln1.beta",
    "conv2.w", "conv2.b", "ln2.gamma", "ln2.beta", "alpha",
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    max_len: int = 20
    base_dilations: tuple[int, ...] = (1, 2, 4, 8)
    num_blocks: int = 4
    kernel_width: int = 3
    output_vocab: int | None = None  # softmax classes minus padding; defaults to vocab_size

    def __post_init__(self):
        object.__setattr__(self, "base_dilations", tuple(int(d) for d in self.base_dilations))
        if self.output_vocab == self.vocab_size:
            object.__setattr__(self, "output_vocab", None)
        for name in ("vocab_size", "embed_dim", "max_len", "kernel_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_blocks < 0:
            raise ValueError(f"num_blocks must be non-negative, got {self.num_blocks}")
        if not self.base_dilations or min(self.base_dilations) < 1:
            raise ValueError(f"base_dilations must be positive ints, got {self.base_dilations}")

    @property
    def num_outputs(self) -> int:
        return (self.vocab_size if self.output_vocab is None else self.output_vocab) + 1

    def dilation_for(self, index: int) -> int:
        return self.base_dilations[index % len(self.base_dilations)]

    def block_dilations(self) -> list[int]:
        return [self.dilation_for(i) for i in range(self.num_blocks)]


@dataclass
class BlockParams:
    """One residual block. ``conv2`` runs at twice the block's dilation."""

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    alpha: np.ndarray  # 0-d array
    dilation: int

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name.replace(".", "_")) for name in BLOCK_TENSORS}

    def copy(self) -> "BlockParams":
        return copy.deepcopy(self)


@dataclass
class ModelParams:
    embedding: np.ndarray
    blocks: list[BlockParams]
    softmax_w: np.ndarray
    softmax_b: np.ndarray
    config: ModelConfig

    def named_tensors(self) -> dict[str, np.ndarray]:
        """All parameter tensors keyed by their checkpoint names, in checkpoint order."""
        out = {"embedding": self.embedding}
        for i, block in enumerate(self.blocks):
            for name, t in block.tensors().items():
                out[f"block{i}.{name}"] = t
        out["softmax.w"] = self.softmax_w
        out["softmax.b"] = self.softmax_b
        return out

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "ModelParams":
        """New params of the same structure holding ``tensors`` (keyed as in :meth:`named_tensors`)."""
        blocks = []
        for i, block in enumerate(self.blocks):
            kw = {name.replace(".", "_"): tensors[f"block{i}.{name}"] for name in BLOCK_TENSORS}
            blocks.append(BlockParams(dilation=block.dilation, **kw))
        return ModelParams(tensors["embedding"], blocks, tensors["softmax.w"],
                           tensors["softmax.b"], self.config)

    def astype(self, dtype) -> "ModelParams":
        return self.with_tensors({k: np.array(v, dtype=dtype) for k, v in self.named_tensors().items()})

    def copy(self) -> "ModelParams":
        return self.with_tensors({k: v.copy() for k, v in self.named_tensors().items()})

    @property
    def dilations(self) -> list[int]:
        return [b.dilation for b in self.blocks]

    @property
    def dtype(self):
        return self.embedding.dtype


def param_count(params: ModelParams) -> dict[str, int]:
    """Parameter counts split into embedding, blocks and softmax."""
    named = params.named_tensors()
    blocks = sum(v.size for k, v in named.items() if k.startswith("block"))
    return {
        "embedding": named["embedding"].size,
        "blocks": blocks,
        "softmax": named["softmax.w"].size + named["softmax.b"].size,
    }


def init_block(config: ModelConfig, dilation: int, rng: np.random.Generator,
               dtype=np.float32) -> BlockParams:
    k, kw = config.embed_dim, config.kernel_width
    std = np.sqrt(2.0 / (kw * k))

    def conv_w():
        return (rng.standard_normal((kw, k, k)) * std).astype(dtype)

    return BlockParams(
        conv1_w=conv_w(), conv1_b=np.zeros(k, dtype),
        ln1_gamma=np.ones(k, dtype), ln1_beta=np.zeros(k, dtype),
        conv2_w=conv_w(), conv2_b=np.zeros(k, dtype),
        ln2_gamma=np.ones(k, dtype), ln2_beta=np.zeros(k, dtype),
        alpha=np.zeros((), dtype), dilation=int(dilation),
    )


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Fresh model: He-scaled conv weights, unit LN, zero alphas, N(0, 0.01) embedding/softmax."""
    rng = np.random.default_rng(seed)
    k = config.embed_dim
    embedding = (rng.standard_normal((config.vocab_size + 1, k)) * 0.01).astype(dtype)
    blocks = [init_block(config, d, rng, dtype) for d in config.block_dilations()]
    softmax_w = (rng.standard_normal((k, config.num_outputs)) * 0.01).astype(dtype)
    softmax_b = np.zeros(config.num_outputs, dtype)
    return ModelParams(embedding, blocks, softmax_w, softmax_b, config)


def with_depth(params: ModelParams, blocks: list[BlockParams]) -> ModelParams:
    """Params sharing ``params``' embedding/softmax arrays but with a new block list."""
    return ModelParams(params.embedding, blocks, params.softmax_w, params.softmax_b,
                       replace(params.config, num_blocks=len(blocks)))


# --- forward / backward ---------------------------------------------------------

@dataclass
class BlockCache:
    h_in: np.ndarray
    c1: np.ndarray
    ln1: K.LayerNormCache
    n1: np.ndarray
    r1: np.ndarray
    c2: np.ndarray
    ln2: K.LayerNormCache
    n2: np.ndarray
    f: np.ndarray


@dataclass
class ForwardCache:
    ids: np.ndarray
    blocks: list[BlockCache] = field(default_factory=list)
    h_final: np.ndarray | None = None


def _block_forward(block: BlockParams, h: np.ndarray, cache: bool):
    c1 = K.causal_dilated_conv1d(h, block.conv1_w, block.conv1_b, block.dilation)
    n1, ln1 = K.layer_norm(c1, block.ln1_gamma, block.ln1_beta)
    r1 = K.relu(n1)
    c2 = K.causal_dilated_conv1d(r1, block.conv2_w, block.conv2_b, 2 * block.dilation)
    n2, ln2 = K.layer_norm(c2, block.ln2_gamma, block.ln2_beta)
    f = K.relu(n2)
    out = K.scaled_residual_add(h, f, block.alpha)
    bc = BlockCache(h, c1, ln1, n1, r1, c2, ln2, n2, f) if cache else None
    return out, bc


def _block_backward(block: BlockParams, bc: BlockCache, dout: np.ndarray):
    dh, df, dalpha = K.scaled_residual_add_backward(bc.f, block.alpha, dout)
    dn2 = K.relu_backward(bc.n2, df)
    dc2, dg2, dbeta2 = K.layer_norm_backward(bc.ln2, dn2)
    dr1, dw2, db2 = K.causal_dilated_conv1d_backward(bc.r1, block.conv2_w, 2 * block.dilation, dc2)
    dn1 = K.relu_backward(bc.n1, dr1)
    dc1, dg1, dbeta1 = K.layer_norm_backward(bc.ln1, dn1)
    dx, dw1, db1 = K.causal_dilated_conv1d_backward(bc.h_in, block.conv1_w, block.dilation, dc1)
    grads = BlockParams(dw1, db1, dg1, dbeta1, dw2, db2, dg2, dbeta2,
                        np.asarray(dalpha, dtype=dout.dtype), block.dilation)
    return dh + dx, grads


def _check_ids(params: ModelParams, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError(f"ids must be [B, t], got shape {ids.shape}")
    return ids


def encode(params: ModelParams, ids: np.ndarray, keep_hidden: bool = False):
    """Run embedding and blocks; returns ``(H_L, hidden)`` with hidden = [H_1..H_L] or None."""
    ids = _check_ids(params, ids)
    h = K.embedding_lookup(params.embedding, ids)
    hidden = [] if keep_hidden else None
    for block in params.blocks:
        h, _ = _block_forward(block, h, cache=False)
        if keep_hidden:
            hidden.append(h)
    return h, hidden


def project(params: ModelParams, h: np.ndarray) -> np.ndarray:
    return h @ params.softmax_w + params.softmax_b


def forward(params: ModelParams, ids: np.ndarray, keep_hidden: bool = False):
    """Logits ``[B, t, V+1]`` for every position, plus per-block outputs if requested."""
    h, hidden = encode(params, ids, keep_hidden)
    return project(params, h), hidden


def forward_with_cache(params: ModelParams, ids: np.ndarray):
    """Forward pass retaining everything :func:`backward` needs."""
    ids = _check_ids(params, ids)
    cache = ForwardCache(ids)
    h = K.embedding_lookup(params.embedding, ids)
    for block in params.blocks:
        h, bc = _block_forward(block, h, cache=True)
        cache.blocks.append(bc)
    cache.h_final = h
    return project(params, h), cache


def backward(params: ModelParams, cache: ForwardCache | None,
             grad_logits: np.ndarray) -> ModelParams:
    """Gradients for every parameter, returned in a :class:`ModelParams` of the same shape."""
    if cache is None or cache.h_final is None:
        raise ValueError("backward requires the cache from forward_with_cache")
    k = params.config.embed_dim
    g2 = grad_logits.reshape(-1, grad_logits.shape[-1])
    d_softmax_w = cache.h_final.reshape(-1, k).T @ g2
    d_softmax_b = g2.sum(axis=0)
    dh = (g2 @ params.softmax_w.T).reshape(cache.h_final.shape)
    block_grads = []
    for block, bc in zip(reversed(params.blocks), reversed(cache.blocks)):
        dh, bg = _block_backward(block, bc, dh)
        block_grads.append(bg)
    block_grads.reverse()
    d_embedding = K.embedding_backward(params.embedding.shape, cache.ids, dh)
    return ModelParams(d_embedding, block_grads, d_softmax_w, d_softmax_b, params.config)


def sequence_loss(params: ModelParams, inputs: np.ndarray, targets: np.ndarray,
                  mask: np.ndarray, with_grad: bool = True):
    """Cross-entropy of next-item targets; returns ``(loss, grads or None)``."""
    if with_grad:
        logits, cache = forward_with_cache(params, inputs)
        loss, dlogits = K.softmax_cross_entropy(logits, targets, mask)
        return loss, backward(params, cache, dlogits)
    logits, _ = forward(params, inputs)
    loss, _ = K.softmax_cross_entropy(logits, targets, mask)
    return loss, None
