"""Binary containers for models (``QTM1``) and calibration sets (``QCAL``).

All multi-byte fields are little-endian. See ``docs/container_format.md``
for the byte-level layout with an annotated example.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from quantlab.calibration import CalibrationSet
from quantlab.errors import ChecksumError, FormatError, InputError, VersionError
from quantlab.nn import Activation, Layer, ModelGraph
from quantlab.quantizer import QuantizedTensor, QuantParams, Scheme

MODEL_MAGIC = b"QTM1"
MODEL_VERSION = 1
CAL_MAGIC = b"QCAL"
CAL_VERSION = 1

KIND_FP32 = 0
KIND_AFFINE = 1
KIND_LOG = 2

FLAG_HAS_QUANTIZED = 1

_ACT_CODES = {Activation.NONE: 0, Activation.RELU: 1}
_ACT_FROM_CODE = {v: k for k, v in _ACT_CODES.items()}

_QBLOCK = struct.Struct("<fiBBf")
_HEADER = struct.Struct("<4sIII")


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def _write_atomic(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        # mkstemp creates 0600; give the file ordinary permissions
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _tensor_record(name: str, t) -> bytes:
    raw_name = name.encode("utf-8")
    parts = [struct.pack("<H", len(raw_name)), raw_name]
    if isinstance(t, QuantizedTensor):
        p = t.params
        kind = KIND_LOG if p.scheme is Scheme.LOG else KIND_AFFINE
        shape, payload = t.shape, t.payload
        # log tensors keep their top exponent in the zero-point slot
        z = p.log_exp_max if kind == KIND_LOG else p.zero_point
        qblock = _QBLOCK.pack(p.scale, z, p.bits, int(p.signed), p.gamma)
    else:
        arr = np.ascontiguousarray(t, dtype="<f4")
        kind, shape, payload, qblock = KIND_FP32, arr.shape, arr.tobytes(), b""
    parts.append(struct.pack("<BB", kind, len(shape)))
    parts.append(struct.pack(f"<{len(shape)}Q", *shape))
    parts.append(qblock)
    parts.append(struct.pack("<Q", len(payload)))
    parts.append(payload)
    return b"".join(parts)


def _named_tensors(model: ModelGraph):
    for i, layer in enumerate(model.layers):
        meta = np.array([_ACT_CODES[layer.activation], layer.dropout_rate], dtype=np.float32)
        yield f"layers.{i}.weight", layer.weight
        yield f"layers.{i}.bias", layer.bias
        yield f"layers.{i}.meta", meta


def serialize_model(model: ModelGraph) -> bytes:
    tensors = list(_named_tensors(model))
    flags = FLAG_HAS_QUANTIZED if any(isinstance(t, QuantizedTensor) for _, t in tensors) else 0
    body = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, flags, len(tensors))
    body += b"".join(_tensor_record(name, t) for name, t in tensors)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.end = end
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(s, what))


def _parse_records(data: bytes) -> tuple[int, list]:
    if len(data) < _HEADER.size + 4:
        raise FormatError("file too short for a model container", len(data))
    magic, version, flags, count = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != MODEL_VERSION:
        raise VersionError(f"unsupported container version {version}")
    r = _Reader(data, len(data) - 4)
    r.pos = _HEADER.size
    records = []
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H", "name length")
        raw_name = r.take(name_len, "name")
        kind, rank = r.unpack("<BB", "kind/rank")
        dims = r.unpack(f"<{rank}Q", "dims")
        qblock = r.unpack(_QBLOCK.format, "quant block") if kind != KIND_FP32 else None
        (payload_len,) = r.unpack("<Q", "payload length")
        payload = r.take(payload_len, "payload")
        records.append((start, raw_name, kind, dims, qblock, payload))
    if r.pos != len(data) - 4:
        raise FormatError(f"{len(data) - 4 - r.pos} unexpected bytes before checksum", r.pos)
    return flags, records


def _decode_tensor(start, raw_name, kind, dims, qblock, payload):
    try:
        name = raw_name.decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("tensor name is not UTF-8", start) from None
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    if kind == KIND_FP32:
        if len(payload) != 4 * count:
            raise FormatError(f"{name}: payload {len(payload)} bytes does not match dims {dims}", start)
        return name, np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if kind not in (KIND_AFFINE, KIND_LOG):
        raise FormatError(f"{name}: unknown tensor kind {kind}", start)
    scale, z, bits, signed, gamma = qblock
    try:
        if kind == KIND_LOG:
            p = QuantParams(scale, 0, bits, bool(signed), gamma, Scheme.LOG, z)
        else:
            p = QuantParams(scale, z, bits, bool(signed), gamma)
        return name, QuantizedTensor(p, dims, bytes(payload))
    except (FormatError, ValueError) as exc:
        raise FormatError(f"{name}: {exc}", start) from None


def deserialize_model(data: bytes) -> ModelGraph:
    _, records = _parse_records(data)
    stored = struct.unpack_from("<I", data, len(data) - 4)[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumError("CRC32 mismatch: model file is corrupt")
    tensors = dict(_decode_tensor(*rec) for rec in records)
    layers = []
    i = 0
    while f"layers.{i}.weight" in tensors:
        try:
            w = tensors[f"layers.{i}.weight"]
            b = tensors[f"layers.{i}.bias"]
            meta = tensors[f"layers.{i}.meta"]
        except KeyError as exc:
            raise FormatError(f"layer {i} is missing tensor {exc}") from None
        act_code = int(meta[0])
        if act_code not in _ACT_FROM_CODE:
            raise FormatError(f"layer {i}: unknown activation code {act_code}")
        try:
            layers.append(Layer(w, b, _ACT_FROM_CODE[act_code], float(meta[1])))
        except ValueError as exc:
            raise FormatError(f"layer {i}: {exc}") from None
        i += 1
    if 3 * i != len(tensors):
        raise FormatError("container holds tensors that are not part of the layer chain")
    try:
        return ModelGraph(layers)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def save_model(model: ModelGraph, path) -> int:
    """Write ``model`` atomically; returns the number of bytes written."""
    data = serialize_model(model)
    _write_atomic(path, data)
    return len(data)


def load_model(path) -> ModelGraph:
    return deserialize_model(Path(path).read_bytes())


def model_size(model: ModelGraph) -> int:
    """Exact container size in bytes."""
    return len(serialize_model(model))


def serialize_calibration(cal: CalibrationSet) -> bytes:
    shape = cal.sample_shape
    head = struct.pack("<4sIII", CAL_MAGIC, CAL_VERSION, len(cal.samples), len(shape))
    head += struct.pack(f"<{len(shape)}Q", *shape)
    body = np.stack(cal.samples).astype("<f4").tobytes()
    return head + body


def save_calibration(cal: CalibrationSet, path) -> int:
    if cal is None or not cal.samples:
        raise InputError("refusing to save an empty calibration set")
    data = serialize_calibration(cal)
    _write_atomic(path, data)
    return len(data)


def deserialize_calibration(data: bytes) -> CalibrationSet:
    if len(data) < 16:
        raise FormatError("file too short for a calibration set", len(data))
    magic, version, count, rank = struct.unpack_from("<4sIII", data)
    if magic != CAL_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != CAL_VERSION:
        raise VersionError(f"unsupported calibration version {version}")
    if len(data) < 16 + 8 * rank:
        raise FormatError("truncated dims", len(data))
    dims = struct.unpack_from(f"<{rank}Q", data, 16)
    offset = 16 + 8 * rank
    per = int(np.prod(dims, dtype=np.int64)) if dims else 1
    expected = offset + 4 * per * count
    if len(data) != expected:
        raise FormatError(f"payload is {len(data) - offset} bytes, header implies {expected - offset}", offset)
    if count == 0:
        raise FormatError("calibration set is empty", 8)
    arr = np.frombuffer(data, dtype="<f4", offset=offset).astype(np.float32).reshape((count,) + tuple(dims))
    return CalibrationSet(list(arr))


def load_calibration(path) -> CalibrationSet:
    return deserialize_calibration(Path(path).read_bytes())
