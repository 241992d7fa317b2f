"""Network surgery: seeded init, layer transplants, and checkpoint files.

Checkpoint format (all integers little-endian):

    magic "TFLB" | u32 format version
    u32 length + canonical architecture descriptor (utf-8 text)
    u32 length + architecture fingerprint (hex of sha256 over the descriptor)
    u32 length + dataset id | i64 seed | u64 iterations        (provenance)
    u32 weight layer count
    per weight layer, in stack order:
        u32 length + origin tag | u8 frozen flag
        weights blob | bias blob

    blob = u8 ndim | u32 dims... | u64 payload bytes | float32 data | u32 crc32

Weights are stored as float32. Writes go through a temp file and a rename so
a crash never leaves a half-written checkpoint behind.
"""
from __future__ import annotations

import hashlib
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng as rngmod
from .errors import (ChecksumError, CorruptCheckpointError, FingerprintError,
                     InputError, VersionError)
from .nncore import LayerState, Model, ModelSpec, parse_spec, weight_layer_name

MAGIC = b"TFLB"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Provenance:
    dataset_id: str
    seed: int
    iterations: int


@dataclass
class Checkpoint:
    spec: ModelSpec
    layers: list[LayerState]  # weight layers only, stack order
    provenance: Provenance
    format_version: int = FORMAT_VERSION

    def fingerprint(self) -> str:
        return self.spec.fingerprint()

    def to_model(self) -> Model:
        states: list[Optional[LayerState]] = [None] * len(self.spec.layers)
        for idx, layer in zip(self.spec.weight_layers(), self.layers):
            states[idx] = layer.copy()
        return Model(self.spec, states)

    @staticmethod
    def from_model(model: Model, provenance: Provenance) -> "Checkpoint":
        layers = []
        for state in model.weight_states():
            layers.append(LayerState(
                np.ascontiguousarray(state.weights, dtype=np.float32),
                np.ascontiguousarray(state.bias, dtype=np.float32),
                state.frozen, state.origin))
        return Checkpoint(model.spec, layers, provenance)


def checkpoint_equal(a: Checkpoint, b: Checkpoint) -> bool:
    """Bitwise equality over weights plus all metadata."""
    if a.spec != b.spec or a.provenance != b.provenance or a.format_version != b.format_version:
        return False
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.frozen != lb.frozen or la.origin != lb.origin:
            return False
        for xa, xb in ((la.weights, lb.weights), (la.bias, lb.bias)):
            if xa.dtype != xb.dtype or xa.shape != xb.shape:
                return False
            if np.ascontiguousarray(xa).tobytes() != np.ascontiguousarray(xb).tobytes():
                return False
    return True


def layer_checksum(state: LayerState) -> str:
    """Content hash of one layer's parameters, used by surgery equality tests."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(state.weights).tobytes())
    h.update(np.ascontiguousarray(state.bias).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# initialization and surgery
# ---------------------------------------------------------------------------

def init_random(spec: ModelSpec, seed: int, std: float = 0.01, bias_value: float = 0.0,
                dtype=np.float32) -> Model:
    """Fresh model: weights ~ Gaussian(0, std), biases constant, nothing frozen.

    Each weight layer draws from its own stream keyed by (seed, position), so
    layer k's draw never depends on how many layers sit below it.
    """
    states: list[Optional[LayerState]] = [None] * len(spec.layers)
    for pos, (idx, (ws, bs)) in enumerate(zip(spec.weight_layers(), spec.weight_shapes()), start=1):
        gen = rngmod.stream(rngmod.INIT, seed, pos)
        states[idx] = LayerState(
            gen.normal(0.0, std, ws).astype(dtype),
            np.full(bs, bias_value, dtype=dtype),
            frozen=False, origin="random")
    return Model(spec, states)


def source_tag(provenance: Provenance) -> str:
    return f"copied:{provenance.dataset_id}#seed{provenance.seed}#it{provenance.iterations}"


def transplant(base: Checkpoint, spec: ModelSpec, n: int, mode: str, seed: int,
               std: float = 0.01, bias_value: float = 0.0) -> Model:
    """Copy the first ``n`` weight layers of ``base``; draw the rest fresh.

    ``mode`` is "frozen" or "finetune" and governs only the copied layers.
    ``n = 0`` degenerates to a pure random init; ``n = L`` is rejected because
    a model with nothing left to train is not a treatment.
    """
    if mode not in ("frozen", "finetune"):
        raise InputError(f"transplant mode must be 'frozen' or 'finetune', got {mode!r}")
    if base.fingerprint() != spec.fingerprint():
        raise FingerprintError(
            "base checkpoint architecture does not match the receiving spec",
            base=base.fingerprint(), spec=spec.fingerprint())
    L = spec.num_weight_layers
    if not 0 <= n <= L - 1:
        raise InputError(f"transplant depth must satisfy 0 <= n <= {L - 1}, got {n}")
    model = init_random(spec, seed, std=std, bias_value=bias_value)
    tag = source_tag(base.provenance)
    for pos in range(1, n + 1):
        idx = spec.weight_layers()[pos - 1]
        src = base.layers[pos - 1]
        model.states[idx] = LayerState(src.weights.copy(), src.bias.copy(),
                                       frozen=(mode == "frozen"), origin=tag)
    return model


def randomize_first_n(spec: ModelSpec, n: int, seed: int, freeze_random: bool = True,
                      std: float = 0.01, bias_value: float = 0.0,
                      random_gain: float | None = None) -> Model:
    """Random model whose first ``n`` weight layers are (by default) frozen.

    With ``random_gain`` set, the randomized layers are drawn fan-in scaled
    (per-layer std ``gain / sqrt(fan_in)``) with zero bias instead of the flat
    ``std``. A gain below 1 then attenuates activations by roughly the same
    factor at every randomized layer, so signal degrades geometrically with
    depth rather than collapsing at whichever layer has the largest fan-in.
    The layers left trainable always use the flat ``std`` / ``bias_value``
    init, the same as every other treatment.
    """
    L = spec.num_weight_layers
    if not 1 <= n <= L - 1:
        raise InputError(f"randomized depth must satisfy 1 <= n <= {L - 1}, got {n}")
    model = init_random(spec, seed, std=std, bias_value=bias_value)
    for pos in range(1, n + 1):
        state = model.states[spec.weight_layers()[pos - 1]]
        if random_gain is not None:
            fan_in = int(np.prod(state.weights.shape[1:])) if state.weights.ndim == 4 \
                else state.weights.shape[0]
            gen = rngmod.stream(rngmod.INIT, seed, pos)
            state.weights[:] = gen.normal(
                0.0, random_gain / np.sqrt(fan_in), state.weights.shape,
            ).astype(state.weights.dtype)
            state.bias[:] = 0.0
        if freeze_random:
            state.frozen = True
    return model


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_blob(arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + struct.pack("<Q", len(data)) + data + struct.pack("<I", zlib.crc32(data))


def save(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    parts = [MAGIC, struct.pack("<I", ckpt.format_version)]
    descriptor = ckpt.spec.describe()
    parts.append(_pack_str(descriptor))
    parts.append(_pack_str(ckpt.spec.fingerprint()))
    parts.append(_pack_str(ckpt.provenance.dataset_id))
    parts.append(struct.pack("<qQ", ckpt.provenance.seed, ckpt.provenance.iterations))
    parts.append(struct.pack("<I", len(ckpt.layers)))
    for layer in ckpt.layers:
        parts.append(_pack_str(layer.origin))
        parts.append(struct.pack("<B", 1 if layer.frozen else 0))
        parts.append(_pack_blob(layer.weights))
        parts.append(_pack_blob(layer.bias))
    blob = b"".join(parts)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, count: int) -> bytes:
        if self.off + count > len(self.data):
            raise CorruptCheckpointError(
                f"checkpoint truncated: wanted {count} bytes at offset {self.off}, "
                f"file has {len(self.data)}")
        out = self.data[self.off:self.off + count]
        self.off += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def take_str(self) -> str:
        (length,) = self.unpack("<I")
        if length > len(self.data):
            raise CorruptCheckpointError(f"checkpoint corrupt: string length {length} exceeds file size")
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptCheckpointError(f"checkpoint corrupt: undecodable string ({e})") from e


def _read_blob(r: _Reader, where: str) -> np.ndarray:
    (ndim,) = r.unpack("<B")
    if ndim > 8:
        raise CorruptCheckpointError(f"checkpoint corrupt: blob rank {ndim} in {where}")
    shape = r.unpack(f"<{ndim}I")
    (nbytes,) = r.unpack("<Q")
    expected = 4 * int(np.prod(shape)) if ndim else 4
    if nbytes != expected:
        raise CorruptCheckpointError(
            f"checkpoint corrupt: blob in {where} declares {nbytes} bytes for shape {shape}")
    data = r.take(nbytes)
    (crc,) = r.unpack("<I")
    if zlib.crc32(data) != crc:
        raise ChecksumError(f"checksum mismatch in layer {where}", layer=where)
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()


def load(path: str | os.PathLike, expect_spec: Optional[ModelSpec] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file: bad magic")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint format version {version}", version=version)
    descriptor = r.take_str()
    stored_fp = r.take_str()
    spec = parse_spec(descriptor)
    if spec.fingerprint() != stored_fp:
        raise CorruptCheckpointError("checkpoint corrupt: fingerprint does not match descriptor")
    dataset_id = r.take_str()
    seed, iterations = r.unpack("<qQ")
    (count,) = r.unpack("<I")
    if count != spec.num_weight_layers:
        raise CorruptCheckpointError(
            f"checkpoint corrupt: {count} stored layers for an architecture with "
            f"{spec.num_weight_layers} weight layers")
    layers = []
    for pos in range(1, count + 1):
        name = weight_layer_name(spec, pos)
        origin = r.take_str()
        (frozen,) = r.unpack("<B")
        weights = _read_blob(r, name)
        bias = _read_blob(r, name)
        layers.append(LayerState(weights, bias, bool(frozen), origin))
    if r.off != len(data):
        raise CorruptCheckpointError(
            f"checkpoint corrupt: {len(data) - r.off} trailing bytes")
    ckpt = Checkpoint(spec, layers, Provenance(dataset_id, seed, iterations), version)
    if expect_spec is not None and ckpt.fingerprint() != expect_spec.fingerprint():
        raise FingerprintError(
            "checkpoint architecture does not match the receiving spec",
            base=ckpt.fingerprint(), spec=expect_spec.fingerprint())
    return ckpt
