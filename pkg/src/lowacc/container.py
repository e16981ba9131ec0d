"""Binary model container.

Layout (all integers little-endian)::

    b"PQSM" | u32 version | u64 header length | header | payload

The header is UTF-8 JSON with two keys: ``manifest``, a list of tensor
records ``{name, role, dtype, shape, offset, length}`` whose offsets are
relative to the start of the payload, and ``metadata``, the model-level
description (layer specs, N:M geometry, activation calibration state and
training provenance). Masks are stored as packed bits in row-major order.
Calibration state lives in the JSON block because JSON floats round-trip
float64 exactly while the tensor dtypes are 32-bit.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError
from .fsutil import atomic_write
from .nn.layers import LayerSpec
from .nn.model import Model
from .quant import CalibrationStats
from .sparsity import NMSparsePattern

MAGIC = b"PQSM"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}
ROLES = ("weight", "mask", "quant-params", "calib")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _layer_name(model: Model, j: int) -> str:
    spec = model.weight_specs[j]
    return spec.name or f"layer{model.weight_layers[j]}"


def encode_model(model: Model) -> bytes:
    chunks, manifest, offset = [], [], 0

    def add(name, role, dtype, shape, data: bytes):
        nonlocal offset
        manifest.append({"name": name, "role": role, "dtype": dtype, "shape": list(shape),
                         "offset": offset, "length": len(data)})
        chunks.append(data)
        offset += len(data)

    for j, (w, pat) in enumerate(zip(model.weights, model.patterns)):
        name = _layer_name(model, j)
        add(f"{name}.weight", "weight", "f32", w.shape, np.ascontiguousarray(w, dtype="<f4").tobytes())
        add(f"{name}.mask", "mask", "u8-bitmask", pat.shape, np.packbits(pat.mask.ravel()).tobytes())
        qp = model.weight_params(j)
        add(f"{name}.wparams", "quant-params", "f32", (2,),
            np.array([qp.scale, qp.offset], dtype="<f4").tobytes())
    metadata = {
        "specs": [s.to_dict() for s in model.specs],
        "input_shape": list(model.input_shape),
        "patterns": [{"n": p.n, "m": p.m} for p in model.patterns],
        "act_stats": [{"decay": s.decay, "lo": s.lo, "hi": s.hi, "count": s.count}
                      for s in model.act_stats],
        "meta": model.meta,
    }
    header = _dumps({"manifest": manifest, "metadata": metadata}).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def save_model(path, model: Model):
    return atomic_write(path, encode_model(model))


def _check_manifest(manifest: list, payload_len: int) -> None:
    spans = []
    for rec in manifest:
        if rec.get("role") not in ROLES or rec.get("dtype") not in (*_DTYPES, "u8-bitmask"):
            raise FormatError(f"bad manifest record {rec.get('name')!r}")
        n = int(np.prod(rec["shape"], dtype=np.int64))
        want = -(-n // 8) if rec["dtype"] == "u8-bitmask" else n * _DTYPES[rec["dtype"]].itemsize
        if rec["length"] != want:
            raise FormatError(f"tensor {rec['name']!r}: length {rec['length']} does not match shape")
        if rec["offset"] < 0 or rec["offset"] + rec["length"] > payload_len:
            raise FormatError(f"tensor {rec['name']!r} extends past end of file")
        spans.append((rec["offset"], rec["offset"] + rec["length"], rec["name"]))
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise FormatError(f"tensors {a!r} and {b!r} overlap")


def decode_model(blob: bytes) -> Model:
    if len(blob) < _PREFIX.size:
        raise FormatError(f"truncated container: {len(blob)} bytes, need {_PREFIX.size} for the prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version} (expected {VERSION})")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise FormatError(f"truncated container: header ends at byte {start}, file has {len(blob)}")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
        manifest, meta = header["manifest"], header["metadata"]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"unreadable container header: {exc}") from exc
    payload = memoryview(blob)[start:]
    _check_manifest(manifest, len(payload))
    tensors = {}
    for rec in manifest:
        raw = payload[rec["offset"]:rec["offset"] + rec["length"]]
        shape = tuple(rec["shape"])
        if rec["dtype"] == "u8-bitmask":
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.unpackbits(np.frombuffer(raw, np.uint8), count=n).astype(bool).reshape(shape)
        else:
            arr = np.frombuffer(raw, _DTYPES[rec["dtype"]]).reshape(shape).astype(_DTYPES[rec["dtype"]].newbyteorder("="))
        tensors[rec["name"]] = arr

    specs = [LayerSpec.from_dict(d) for d in meta["specs"]]
    names = [s.name or f"layer{i}" for i, s in enumerate(specs) if s.has_weight]
    weights, patterns = [], []
    for name, geom in zip(names, meta["patterns"]):
        if f"{name}.weight" not in tensors or f"{name}.mask" not in tensors:
            raise FormatError(f"layer {name!r} lacks a weight or mask record")
        w, mask = tensors[f"{name}.weight"], tensors[f"{name}.mask"]
        if w.shape != mask.shape:
            raise FormatError(f"layer {name!r}: mask shape {mask.shape} differs from weight {w.shape}")
        weights.append(np.array(w, dtype=np.float32))
        patterns.append(NMSparsePattern(mask, geom["n"], geom["m"]))
    stats = [CalibrationStats(**s) for s in meta["act_stats"]]
    try:
        return Model(specs, tuple(meta["input_shape"]), weights, patterns, stats, meta.get("meta", {}))
    except ValueError as exc:
        raise FormatError(f"inconsistent container: {exc}") from exc


def load_model(path) -> Model:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return decode_model(blob)
