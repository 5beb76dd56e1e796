"""Binary containers for models (NCAM v1) and state dumps (NCAS v1).

NCAM v1: 8-byte magic ``NCAMODEL``, a 4-byte little-endian header length,
a UTF-8 JSON header (space-padded to a 16-byte multiple so blobs stay
aligned for zero-copy typed views), then raw little-endian blobs for
W0, b0, W1, b1 in that order: f32 each, or int8/int32/int8/int32 when the
header carries a quantization block.

NCAS v1 is the same framing with magic ``NCASTATE`` and a single state blob
(f32, or int8 with its scale in the header).

Headers are serialized with sorted keys and no whitespace, so identical
inputs produce identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import nca
from . import tensor as T

MODEL_MAGIC = b"NCAMODEL"
STATE_MAGIC = b"NCASTATE"

_TENSOR_SHAPES = [
    ("W0", (nca.PERCEPTION, nca.HIDDEN)),
    ("b0", (nca.HIDDEN,)),
    ("W1", (nca.HIDDEN, nca.CHANNELS)),
    ("b1", (nca.CHANNELS,)),
]


def _pack_header(header: dict) -> bytes:
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    pad = (-(len(raw) + 12)) % 16  # magic+length+header end on a 16-byte edge
    raw += b" " * pad
    return struct.pack("<I", len(raw)) + raw


def _read_header(buf: bytes, magic: bytes):
    if buf[:8] != magic:
        raise ValueError(f"bad magic: expected {magic!r}, got {buf[:8]!r}")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    return header, 12 + hlen


def save_model(path, params: nca.NcaParams, geometry="square",
               state_band=nca.STATE_BAND, quantization=None, quant_blobs=None,
               provenance=None):
    """Write an NCAM v1 file.

    Float models pass `params` alone.  Quantized models pass the
    `quantization` header block plus `quant_blobs` = (W0 int8, b0 int32,
    W1 int8, b1 int32); `params` still supplies shape metadata.
    """
    dtype = "int8" if quantization is not None else "f32"
    header = {
        "format": "NCAM",
        "version": 1,
        "geometry": geometry,
        "channels": nca.CHANNELS,
        "hidden": nca.HIDDEN,
        "state_band": float(state_band),
        "dtype": dtype,
        "tensors": [
            {"name": name, "shape": list(shape),
             "dtype": ("int8" if name.startswith("W") else "int32") if quantization else "f32"}
            for name, shape in _TENSOR_SHAPES
        ],
    }
    if provenance is not None:
        header["provenance"] = provenance
    if quantization is not None:
        header["quantization"] = quantization

    parts = [MODEL_MAGIC, _pack_header(header)]
    if quantization is None:
        for t in params.tensors:
            parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    else:
        want = ["<i1", "<i4", "<i1", "<i4"]
        for blob, dt, (name, shape) in zip(quant_blobs, want, _TENSOR_SHAPES):
            blob = np.asarray(blob)
            if blob.shape != shape:
                raise T.ShapeMismatch(f"{name} blob must be {shape}, got {blob.shape}")
            parts.append(np.ascontiguousarray(blob, dtype=dt).tobytes())
    data = b"".join(parts)
    with open(path, "wb") as f:
        f.write(data)
    return data


def load_model(path):
    """Read an NCAM v1 file -> (header dict, NcaParams or quant blob dict).

    Quantized files return {"W0": int8 array, "b0": int32 array, ...}; the
    scales live in header["quantization"].
    """
    with open(path, "rb") as f:
        buf = f.read()
    header, off = _read_header(buf, MODEL_MAGIC)
    if header.get("format") != "NCAM" or header.get("version") != 1:
        raise ValueError("not an NCAM v1 file")
    if header.get("channels") != nca.CHANNELS:
        raise ValueError(f"unsupported channel count {header.get('channels')}")
    quant = header.get("quantization")
    arrays = {}
    for name, shape in _TENSOR_SHAPES:
        if quant is None:
            dt = np.dtype("<f4")
        else:
            dt = np.dtype("<i1") if name.startswith("W") else np.dtype("<i4")
        n = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape)
        off += n * dt.itemsize
        arrays[name] = arr.copy()
    if quant is None:
        params = nca.NcaParams(*(T.Tensor(arrays[n]) for n, _ in _TENSOR_SHAPES))
        return header, params
    return header, arrays


def save_state(path, state, quantization=None, meta=None):
    """Write an NCAS v1 state dump (f32, or int8 when values already are)."""
    if isinstance(state, nca.StateGrid):
        values, topology = state.values.data, state.topology
    else:
        values, topology = np.asarray(state), "torus"
    if values.ndim != 3:
        raise T.ShapeMismatch(f"state must be (H, W, C), got {values.shape}")
    is_int8 = values.dtype == np.int8
    header = {
        "format": "NCAS",
        "version": 1,
        "height": int(values.shape[0]),
        "width": int(values.shape[1]),
        "channels": int(values.shape[2]),
        "dtype": "int8" if is_int8 else "f32",
        "topology": topology,
    }
    if quantization is not None:
        header["quantization"] = quantization
    if meta is not None:
        header["meta"] = meta
    blob = np.ascontiguousarray(values, dtype="<i1" if is_int8 else "<f4").tobytes()
    data = STATE_MAGIC + _pack_header(header) + blob
    with open(path, "wb") as f:
        f.write(data)
    return data


def load_state(path):
    """Read an NCAS v1 file -> (header dict, ndarray H x W x C)."""
    with open(path, "rb") as f:
        buf = f.read()
    header, off = _read_header(buf, STATE_MAGIC)
    if header.get("format") != "NCAS" or header.get("version") != 1:
        raise ValueError("not an NCAS v1 file")
    shape = (header["height"], header["width"], header["channels"])
    dt = np.dtype("<i1") if header["dtype"] == "int8" else np.dtype("<f4")
    values = np.frombuffer(buf, dtype=dt, count=int(np.prod(shape)), offset=off)
    return header, values.reshape(shape).copy()
