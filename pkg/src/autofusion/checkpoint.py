"""PFCK binary checkpoints for model parameters and hard permutation sets.

Layout (all integers little-endian u32 unless noted)::

    b"PFCK" | version | kind (u8) | layer count | input C, H, W | kernel
    per layer: ndim, dims...          (model files)
    per layer: n                      (permutation files)
    payload: float32 weights then bias per layer, row-major
             or u32 assignment vectors
    checksum: first 8 bytes of blake2b over everything before it

Kinds: 0 MLP, 1 CNN, 2 permutation set. Loading checks magic, version and
checksum before anything is decoded.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .nn import ArchDescriptor, DimensionError, ModelParams
from .sinkhorn import HardPermutation

MAGIC = b"PFCK"
VERSION = 1
KIND_CODES = {"mlp": 0, "cnn": 1}
KIND_PERM = 2


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _u32(*vals) -> bytes:
    return struct.pack("<%dI" % len(vals), *vals)


def _header(kind: int, count: int, input_shape=(0, 0, 0), kernel=0) -> bytes:
    return MAGIC + _u32(VERSION) + bytes([kind]) + _u32(count, *input_shape, kernel)


def encode_params(params: ModelParams) -> bytes:
    arch = params.arch
    parts = [_header(KIND_CODES[arch.kind], params.num_layers, arch.input_shape,
                     arch.kernel if arch.kind == "cnn" else 0)]
    for w in params.weights:
        parts.append(_u32(w.ndim, *w.shape))
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def encode_perms(perms) -> bytes:
    assignments = [np.asarray(getattr(p, "assignment", p)) for p in perms]
    parts = [_header(KIND_PERM, len(assignments))]
    parts.append(_u32(*[len(a) for a in assignments]))
    for a in assignments:
        parts.append(np.ascontiguousarray(a, dtype="<u4").tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, n=1):
        vals = struct.unpack("<%dI" % n, self.take(4 * n))
        return vals if n > 1 else vals[0]

    def array(self, dtype, shape):
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(np.dtype(dtype).itemsize * count)
        return np.frombuffer(raw, dtype=dtype).reshape(shape)


def _open(data: bytes):
    if len(data) < 8 + 4 + 1 + 4 or data[:4] != MAGIC:
        raise CheckpointError("not a PFCK file (bad magic)")
    body, digest = data[:-8], data[-8:]
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported PFCK version {version}")
    if _checksum(body) != digest:
        raise ChecksumError("checksum mismatch: file is corrupt")
    kind = r.take(1)[0]
    return r, kind


def _arch_from_shapes(kind, input_shape, kernel, shapes) -> ArchDescriptor:
    if kind == "mlp":
        hidden = tuple(s[0] for s in shapes[:-1])
        return ArchDescriptor.mlp(hidden, shapes[-1][0], input_shape)
    channels = tuple(s[0] for s in shapes if len(s) == 4)
    dense = [s for s in shapes if len(s) == 2]
    arch = ArchDescriptor("cnn", input_shape, tuple(s[0] for s in dense[:-1]),
                          dense[-1][0], channels, kernel)
    return arch


def decode_params(data: bytes) -> ModelParams:
    r, code = _open(data)
    kinds = {v: k for k, v in KIND_CODES.items()}
    if code not in kinds:
        raise CheckpointError(f"file holds kind {code}, not model parameters")
    count = r.u32()
    c, h, w = r.u32(3)
    kernel = r.u32()
    shapes = []
    for _ in range(count):
        ndim = r.u32()
        shapes.append(tuple(r.u32(ndim)) if ndim > 1 else (r.u32(),))
    try:
        arch = _arch_from_shapes(kinds[code], (c, h, w), kernel, shapes)
    except (ValueError, IndexError) as exc:
        raise CheckpointError(f"inconsistent architecture descriptor: {exc}") from exc
    weights, biases = [], []
    for s in shapes:
        weights.append(r.array("<f4", s).astype(np.float32))
        biases.append(r.array("<f4", (s[0],)).astype(np.float32))
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after payload")
    try:
        return ModelParams(weights, biases, arch)
    except DimensionError as exc:
        raise CheckpointError(str(exc)) from exc


def decode_perms(data: bytes) -> list[HardPermutation]:
    r, code = _open(data)
    if code != KIND_PERM:
        raise CheckpointError(f"file holds kind {code}, not a permutation set")
    count = r.u32()
    r.u32(4)  # unused input shape and kernel slots
    sizes = [r.u32() for _ in range(count)]
    perms = []
    for n in sizes:
        a = r.array("<u4", (n,)).astype(np.int64)
        if not np.array_equal(np.sort(a), np.arange(n)):
            raise CheckpointError("assignment vector is not a permutation")
        perms.append(HardPermutation(a))
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after payload")
    return perms


def save_params(path, params: ModelParams):
    Path(path).write_bytes(encode_params(params))


def load_params(path) -> ModelParams:
    return decode_params(Path(path).read_bytes())


def save_perms(path, perms):
    Path(path).write_bytes(encode_perms(perms))


def load_perms(path) -> list[HardPermutation]:
    return decode_perms(Path(path).read_bytes())
