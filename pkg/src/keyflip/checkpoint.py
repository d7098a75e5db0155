"""Little-endian binary checkpoint for quantized toy models.

Layout::

    header   magic b"KFLP" | u16 version | u8 kind (0=bf16, 1=int8)
             | u32 vocab | u32 context | u32 d_model | u32 n_heads
             | u32 n_blocks | u32 d_ff | i32 eos_id (-1 = none) | u32 pad_id
             | u32 n_tensors
    tensor   u16 name_len | name (utf-8) | u8 ndim | u32 dims[ndim]
             | f64 scale (int8 only) | u32 count | raw patterns (u16 or u8)
    vocab    u32 n_words | (u16 len | utf-8 word) * n_words   (n_words may be 0)

Tensors appear in layer order, so a tensor's position in the file is its
layer id and the concatenated pattern bytes form the model's memory image.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .bitcodec import Kind, QuantFormat
from .model import LayerTensor, ModelConfig, ToyModel, param_shapes

MAGIC = b"KFLP"
VERSION = 1
_KINDS = {Kind.BF16: 0, Kind.INT8: 1}


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write through a temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(model: ToyModel, vocab=()) -> bytes:
    cfg = model.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HB", VERSION, _KINDS[model.kind]))
    buf.write(struct.pack("<6I", cfg.vocab_size, cfg.context_length, cfg.d_model,
                          cfg.n_heads, cfg.n_blocks, cfg.d_ff))
    buf.write(struct.pack("<iII", -1 if model.eos_id is None else model.eos_id,
                          model.pad_id, len(model.layers)))
    for lt in model.layers:
        name = lt.name.encode()
        buf.write(struct.pack("<H", len(name)) + name)
        buf.write(struct.pack("<B", len(lt.shape)) + struct.pack(f"<{len(lt.shape)}I", *lt.shape))
        if lt.fmt.kind is Kind.INT8:
            buf.write(struct.pack("<d", lt.fmt.scale))
        buf.write(struct.pack("<I", lt.size))
        buf.write(lt.patterns.astype(np.dtype(lt.fmt.dtype).newbyteorder("<")).tobytes())
    words = [w.encode() for w in vocab]
    buf.write(struct.pack("<I", len(words)))
    for w in words:
        buf.write(struct.pack("<H", len(w)) + w)
    return buf.getvalue()


def save(model: ToyModel, path, vocab=()) -> None:
    atomic_write_bytes(path, dumps(model, vocab))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def loads(data: bytes, dtype=None) -> tuple[ToyModel, list[str]]:
    import torch

    dtype = torch.float32 if dtype is None else dtype
    r = _Reader(data)
    if r.raw(4) != MAGIC:
        raise CheckpointError("bad magic")
    version, kind_code = r.take("<HB")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    kind = {v: k for k, v in _KINDS.items()}.get(kind_code)
    if kind is None:
        raise CheckpointError(f"unknown format kind {kind_code}")
    vocab_size, context, d_model, n_heads, n_blocks, d_ff = r.take("<6I")
    eos_id, pad_id, n_tensors = r.take("<iII")
    cfg = ModelConfig(vocab_size, context, d_model, n_heads, n_blocks, d_ff)
    expected = param_shapes(cfg)
    if n_tensors != len(expected):
        raise CheckpointError(f"expected {len(expected)} tensors, found {n_tensors}")
    layers = []
    for layer_id, (want_name, want_shape) in enumerate(expected):
        (name_len,) = r.take("<H")
        name = r.raw(name_len).decode()
        (ndim,) = r.take("<B")
        shape = r.take(f"<{ndim}I")
        if name != want_name or tuple(shape) != tuple(want_shape):
            raise CheckpointError(f"tensor {layer_id}: got {name}{shape}, expected {want_name}{want_shape}")
        fmt = QuantFormat.int8(r.take("<d")[0]) if kind is Kind.INT8 else QuantFormat.bf16()
        (count,) = r.take("<I")
        itemsize = fmt.width // 8
        patterns = np.frombuffer(r.raw(count * itemsize), dtype=np.dtype(fmt.dtype).newbyteorder("<"))
        layers.append(LayerTensor.from_patterns(layer_id, name, shape, fmt, patterns.astype(fmt.dtype), dtype))
    (n_words,) = r.take("<I")
    vocab = []
    for _ in range(n_words):
        (n,) = r.take("<H")
        vocab.append(r.raw(n).decode())
    model = ToyModel(cfg, layers, None if eos_id < 0 else eos_id, pad_id)
    return model, vocab


def load(path, dtype=None) -> tuple[ToyModel, list[str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes(), dtype)


def memory_image(model: ToyModel) -> tuple[bytes, dict[int, int]]:
    """Concatenated little-endian pattern bytes and each layer's byte offset."""
    offsets, chunks, pos = {}, [], 0
    for lt in model.layers:
        offsets[lt.layer_id] = pos
        b = lt.patterns.astype(np.dtype(lt.fmt.dtype).newbyteorder("<")).tobytes()
        chunks.append(b)
        pos += len(b)
    return b"".join(chunks), offsets
