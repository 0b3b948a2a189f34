"""Checkpoint container: a text manifest followed by named little-endian fp32 tensors.

Layout (all integers are unsigned 64-bit little-endian)::

    b"PSTKCKPT" | manifest_len | manifest (utf-8 key=value lines)
    tensor_count | per tensor: name_len | name | rank | dims[rank] | fp32 payload
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .model import BLOCK_TENSORS, BlockParams, ModelConfig, ModelParams

MAGIC = b"PSTKCKPT"
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def format_manifest(params: ModelParams) -> str:
    cfg = params.config
    lines = [
        f"vocab_size={cfg.vocab_size}",
        f"embed_dim={cfg.embed_dim}",
        f"max_len={cfg.max_len}",
        "base_dilations=" + ",".join(map(str, cfg.base_dilations)),
        f"num_blocks={cfg.num_blocks}",
        f"kernel_width={cfg.kernel_width}",
        f"output_vocab={cfg.num_outputs - 1}",
        "block_dilations=" + ",".join(map(str, params.dilations)),
    ]
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> tuple[ModelConfig, list[int]]:
    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"bad manifest line: {line!r}")
        fields[key.strip()] = value.strip()

    def ints(value: str) -> list[int]:
        return [int(v) for v in value.split(",") if v]

    try:
        cfg = ModelConfig(
            vocab_size=int(fields["vocab_size"]),
            embed_dim=int(fields["embed_dim"]),
            max_len=int(fields["max_len"]),
            base_dilations=tuple(ints(fields["base_dilations"])),
            num_blocks=int(fields["num_blocks"]),
            kernel_width=int(fields["kernel_width"]),
            output_vocab=int(fields["output_vocab"]) if "output_vocab" in fields else None,
        )
        dilations = ints(fields.get("block_dilations", ""))
    except KeyError as exc:
        raise CheckpointError(f"manifest missing field {exc}") from None
    if not fields.get("block_dilations"):
        dilations = cfg.block_dilations()
    if len(dilations) != cfg.num_blocks:
        raise CheckpointError("block_dilations length does not match num_blocks")
    return cfg, dilations


def dumps(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    manifest = format_manifest(params).encode("utf-8")
    buf.write(MAGIC)
    buf.write(_U64.pack(len(manifest)))
    buf.write(manifest)
    named = params.named_tensors()
    buf.write(_U64.pack(len(named)))
    for name, tensor in named.items():
        raw = name.encode("utf-8")
        buf.write(_U64.pack(len(raw)))
        buf.write(raw)
        buf.write(_U64.pack(tensor.ndim))
        for d in tensor.shape:
            buf.write(_U64.pack(d))
        buf.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> ModelParams:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    def u64() -> int:
        return _U64.unpack(take(8))[0]

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    cfg, dilations = parse_manifest(bytes(take(u64())).decode("utf-8"))
    tensors = {}
    for _ in range(u64()):
        name = bytes(take(u64())).decode("utf-8")
        dims = tuple(u64() for _ in range(u64()))
        count = int(np.prod(dims, dtype=np.int64))
        payload = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32)
        tensors[name] = payload.reshape(dims)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")

    try:
        blocks = []
        for i, d in enumerate(dilations):
            kw = {n.replace(".", "_"): tensors.pop(f"block{i}.{n}") for n in BLOCK_TENSORS}
            blocks.append(BlockParams(dilation=d, **kw))
        params = ModelParams(tensors.pop("embedding"), blocks, tensors.pop("softmax.w"),
                             tensors.pop("softmax.b"), cfg)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint missing tensor {exc}") from None
    if tensors:
        raise CheckpointError(f"unexpected tensors: {sorted(tensors)}")
    _validate_shapes(params)
    return params


def _validate_shapes(params: ModelParams) -> None:
    cfg = params.config
    n, k, kw = cfg.vocab_size + 1, cfg.embed_dim, cfg.kernel_width
    out = cfg.num_outputs
    expect = {"embedding": (n, k), "softmax.w": (k, out), "softmax.b": (out,)}
    for i in range(cfg.num_blocks):
        for conv in ("conv1", "conv2"):
            expect[f"block{i}.{conv}.w"] = (kw, k, k)
            expect[f"block{i}.{conv}.b"] = (k,)
        for ln in ("ln1", "ln2"):
            expect[f"block{i}.{ln}.gamma"] = (k,)
            expect[f"block{i}.{ln}.beta"] = (k,)
        expect[f"block{i}.alpha"] = ()
    for name, tensor in params.named_tensors().items():
        if tensor.shape != expect[name]:
            raise CheckpointError(f"{name}: shape {tensor.shape}, expected {expect[name]}")


def save(params: ModelParams, path) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> ModelParams:
    return loads(Path(path).read_bytes())
