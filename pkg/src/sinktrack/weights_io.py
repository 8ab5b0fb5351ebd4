"""STKW tensor files and the seeded toy-model generator.

File layout (all integers little-endian)::

    bytes 0..4    magic b"STKW"
    bytes 4..8    format version, uint32 (currently 1)
    bytes 8..16   header length N, uint64
    bytes 16..16+N  UTF-8 JSON header, space padded so the payload starts
                    on a 64-byte boundary
    payload       raw float32 data, every tensor starting on a 64-byte
                  boundary (zero padding in between)

The header maps tensor name -> {"shape": [...], "dtype": "f32",
"offsets": [begin, end]} with absolute byte offsets, plus an optional
"__metadata__" object. Model files keep their ModelConfig under
``__metadata__["config"]``. Keys are written sorted, tensors are laid out
in sorted name order, so identical input gives identical bytes.
"""

from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path

import numba
import numpy as np

from .errors import (
    AlignmentError,
    BoundsError,
    FormatError,
    MissingTensorError,
    NonFiniteError,
    ShapeError,
)
from .model import LayerWeights, ModelConfig, ModelWeights

MAGIC = b"STKW"
VERSION = 1
ALIGN = 64
PREAMBLE = 16
METADATA_KEY = "__metadata__"

TOY_SCALE = 0.02


def _pad(n: int) -> int:
    return (-n) % ALIGN


def save_tensors(tensors: dict, path, metadata: dict | None = None) -> None:
    """Write named float32 tensors to ``path``."""
    path = Path(path)
    names = sorted(tensors)
    arrays = {}
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name!r} contains non-finite values")
        arrays[name] = arr

    # Offsets depend on the header size and vice versa; iterate to a fixed point.
    header_len = 0
    while True:
        data_start = PREAMBLE + header_len
        entries, offset = {}, data_start
        for name in names:
            offset += _pad(offset)
            nbytes = arrays[name].nbytes
            entries[name] = {
                "dtype": "f32",
                "offsets": [offset, offset + nbytes],
                "shape": list(arrays[name].shape),
            }
            offset += nbytes
        if metadata is not None:
            entries[METADATA_KEY] = metadata
        blob = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode("utf-8")
        needed = len(blob) + _pad(PREAMBLE + len(blob))
        if needed == header_len:
            break
        header_len = needed
    blob += b" " * (header_len - len(blob))

    out = bytearray(MAGIC)
    out += struct.pack("<IQ", VERSION, header_len)
    out += blob
    for name in names:
        begin = entries[name]["offsets"][0]
        out += b"\x00" * (begin - len(out))
        out += arrays[name].tobytes()
    try:
        path.write_bytes(bytes(out))
    except OSError as exc:
        raise OSError(f"cannot write tensor file {path}: {exc.strerror or exc}") from exc


def load_tensors(path) -> tuple:
    """Read a tensor file. Returns ``(tensors, metadata)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor file {path}: {exc.strerror or exc}") from exc
    if len(raw) < PREAMBLE:
        raise BoundsError(f"{path}: file too short for the preamble ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, header_len = struct.unpack("<IQ", raw[4:PREAMBLE])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if PREAMBLE + header_len > len(raw):
        raise BoundsError(f"{path}: header of {header_len} bytes runs past end of file")
    try:
        header = json.loads(raw[PREAMBLE:PREAMBLE + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object")
    metadata = header.pop(METADATA_KEY, None)

    data_start = PREAMBLE + header_len
    tensors, spans = {}, []
    for name, entry in header.items():
        try:
            shape = [int(s) for s in entry["shape"]]
            begin, end = (int(x) for x in entry["offsets"])
            dtype = entry["dtype"]
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: malformed header entry for {name!r}") from None
        if dtype != "f32":
            raise FormatError(f"{path}: tensor {name!r} has unsupported dtype {dtype!r}")
        if any(s < 1 for s in shape):
            raise ShapeError(f"{path}: tensor {name!r} has invalid shape {shape}")
        if begin % ALIGN:
            raise AlignmentError(f"{path}: tensor {name!r} starts at {begin}, not {ALIGN}-byte aligned")
        if begin < data_start or end < begin:
            raise FormatError(f"{path}: tensor {name!r} has invalid offsets [{begin}, {end})")
        if end > len(raw):
            raise BoundsError(f"{path}: tensor {name!r} ends at {end}, file has {len(raw)} bytes")
        if math.prod(shape) * 4 != end - begin:
            raise ShapeError(
                f"{path}: tensor {name!r} shape {shape} needs {math.prod(shape) * 4} bytes, "
                f"payload has {end - begin}"
            )
        spans.append((begin, end, name))
        arr = np.frombuffer(raw, dtype="<f4", count=math.prod(shape), offset=begin)
        tensors[name] = arr.astype(np.float32).reshape(shape)
    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise FormatError(f"{path}: tensors {n0!r} and {n1!r} overlap")
    return tensors, metadata


def save_model(weights: ModelWeights, path) -> None:
    save_tensors(weights.named_tensors(), path, {"config": weights.config.to_dict()})


def weights_from_tensors(tensors: dict, config: ModelConfig) -> ModelWeights:
    expected = {"embedding": (config.vocab_size, config.d_model),
                "unembedding": (config.d_model, config.vocab_size)}
    for i in range(config.n_layers):
        for name, shape in LayerWeights.expected_shapes(config).items():
            expected[f"layers.{i}.{name}"] = shape
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise MissingTensorError(f"model file lacks tensors: {', '.join(missing)}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise FormatError(f"model file has unexpected tensors: {', '.join(extra)}")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise ShapeError(f"tensor {name!r} has shape {tensors[name].shape}, config needs {shape}")
    layers = [
        LayerWeights(**{n: tensors[f"layers.{i}.{n}"] for n in LayerWeights.TENSOR_NAMES})
        for i in range(config.n_layers)
    ]
    return ModelWeights(config, tensors["embedding"], tensors["unembedding"], tuple(layers))


def load_model(path) -> ModelWeights:
    tensors, metadata = load_tensors(path)
    if not metadata or "config" not in metadata:
        raise FormatError(f"{path}: no model config in header metadata")
    try:
        config = ModelConfig.from_dict(metadata["config"])
    except TypeError as exc:
        raise FormatError(f"{path}: bad model config: {exc}") from None
    return weights_from_tensors(tensors, config)


# ---------------------------------------------------------------- toy models

_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, n: int) -> list:
    """First ``n`` outputs of SplitMix64, used to expand a seed into xoshiro state."""
    x = seed & _MASK64
    out = []
    for _ in range(n):
        x = (x + 0x9E3779B97F4A7C15) & _MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out.append(z ^ (z >> 31))
    return out


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True)
def _xoshiro_fill(state, n):
    """xoshiro256** outputs; advances ``state`` (uint64[4]) in place."""
    out = np.empty(n, dtype=np.uint64)
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(n):
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3
    return out


class Xoshiro256:
    """xoshiro256** seeded through SplitMix64. Pure integer arithmetic."""

    def __init__(self, seed: int):
        self.state = np.array(splitmix64(seed, 4), dtype=np.uint64)

    def next_u64(self, n: int) -> np.ndarray:
        return _xoshiro_fill(self.state, n)

    def uniform(self, n: int) -> np.ndarray:
        """Floats in [0, 1) from the top 24 bits, exact in float32."""
        return (self.next_u64(n) >> np.uint64(40)).astype(np.float64) * (2.0 ** -24)

    def symmetric(self, shape, scale: float = TOY_SCALE) -> np.ndarray:
        """float32 values in [-scale, scale)."""
        n = math.prod(shape)
        return ((2.0 * self.uniform(n) - 1.0) * scale).astype(np.float32).reshape(shape)


def make_toy_model(config: ModelConfig, seed: int) -> ModelWeights:
    """Deterministic random weights at scale 0.02.

    Draw order: embedding, then per layer wq, wk, wv, wo, w1, b1, w2, b2,
    then unembedding. LayerNorm gains are 1 and biases 0.
    """
    rng = Xoshiro256(seed)
    d, f = config.d_model, config.d_ff
    embedding = rng.symmetric((config.vocab_size, d))
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            wq=rng.symmetric((d, d)),
            wk=rng.symmetric((d, d)),
            wv=rng.symmetric((d, d)),
            wo=rng.symmetric((d, d)),
            w1=rng.symmetric((d, f)),
            b1=rng.symmetric((f,)),
            w2=rng.symmetric((f, d)),
            b2=rng.symmetric((d,)),
            ln1_gain=np.ones(d, np.float32),
            ln1_bias=np.zeros(d, np.float32),
            ln2_gain=np.ones(d, np.float32),
            ln2_bias=np.zeros(d, np.float32),
        ))
    unembedding = rng.symmetric((d, config.vocab_size))
    return ModelWeights(config, embedding, unembedding, tuple(layers))


def make_prompt(length: int, config: ModelConfig, seed: int = 0) -> list:
    """BOS followed by ``length - 1`` pseudo-random non-BOS ids."""
    if length < 1:
        raise ValueError("prompt length must be at least 1")
    if config.vocab_size == 1:
        return [config.bos_id] * length
    rng = Xoshiro256(seed ^ 0x5EED)
    ids = (rng.next_u64(length - 1) % np.uint64(config.vocab_size - 1)).astype(np.int64)
    ids = np.where(ids >= config.bos_id, ids + 1, ids)
    return [config.bos_id] + [int(i) for i in ids]


def seed_from_env(default: int) -> int:
    value = os.environ.get("STKW_SEED")
    return int(value, 0) if value else default
