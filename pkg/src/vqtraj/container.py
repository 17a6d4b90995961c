"""Binary containers for checkpoints and token files.

Checkpoint layout (all little-endian)::

    magic  "VQCK"            4 bytes
    version                  u8
    kind                     u8   (1 = vq model, 2 = language model, 3 = codebook)
    config length            u32
    config                   utf-8 JSON object
    tensor count             u32
    per tensor:
        name length u16, name utf-8, ndim u8, dims u32[ndim], float32 data

Token file layout::

    magic "VQTK", version u8, K u32, o u16, p u16, count u32,
    then u16 token ids [count, o + p]
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

CKPT_MAGIC = b"VQCK"
TOKENS_MAGIC = b"VQTK"
VERSION = 1
KIND_VQ, KIND_LM, KIND_CODEBOOK = 1, 2, 3


class ContainerError(ValueError):
    pass


def write_checkpoint(path, kind: int, config: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    cfg = json.dumps(dict(config), sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<BBI", VERSION, kind, len(cfg)), cfg,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path, kind: int | None = None) -> tuple[int, dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ContainerError(f"{path}: not a checkpoint")
    try:
        version, file_kind, clen = struct.unpack_from("<BBI", raw, 4)
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported version {version}")
        if kind is not None and file_kind != kind:
            raise ContainerError(f"{path}: checkpoint kind {file_kind}, expected {kind}")
        off = 10
        config = json.loads(raw[off:off + clen].decode("utf-8"))
        off += clen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(raw, "<f4", size, off).reshape(shape).astype(np.float32)
            off += 4 * size
    except (struct.error, ValueError) as exc:
        if isinstance(exc, ContainerError):
            raise
        raise ContainerError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(raw):
        raise ContainerError(f"{path}: {len(raw) - off} trailing bytes")
    return file_kind, config, tensors


_TOK_HEADER = struct.Struct("<4sBIHHI")


def write_tokens(path, tokens: np.ndarray, K: int, o: int) -> None:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] <= o:
        raise ValueError("tokens must be [count, o + p] with p >= 1")
    if K > 65536 or (tokens.size and (tokens.min() < 0 or tokens.max() >= K)):
        raise ValueError("token ids must lie in [0, K) with K <= 65536")
    p = tokens.shape[1] - o
    with open(path, "wb") as fh:
        fh.write(_TOK_HEADER.pack(TOKENS_MAGIC, VERSION, K, o, p, len(tokens)))
        fh.write(tokens.astype("<u2").tobytes())


def read_tokens(path) -> tuple[np.ndarray, int, int, int]:
    """Returns ``(tokens, K, o, p)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _TOK_HEADER.size:
        raise ContainerError(f"{path}: truncated token file")
    magic, version, K, o, p, n = _TOK_HEADER.unpack_from(raw)
    if magic != TOKENS_MAGIC or version != VERSION:
        raise ContainerError(f"{path}: not a token file")
    if len(raw) != _TOK_HEADER.size + 2 * n * (o + p):
        raise ContainerError(f"{path}: size does not match header")
    toks = np.frombuffer(raw, "<u2", n * (o + p), _TOK_HEADER.size).reshape(n, o + p)
    return toks.astype(np.int64), K, o, p
