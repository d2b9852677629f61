"""Binary (``LWI1``) and JSON checkpoint formats for ``Model``.

Binary layout, little-endian::

    b"LWI1"            magic
    u32                format version (1)
    u32                feature layer count
    per layer:         u32 rows, u32 cols, f64[rows*cols] weight (row-major), f64[rows] bias
    u32                head count
    per head:          same as a layer
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .netcore import LayerWeights, Model

MAGIC = b"LWI1"
VERSION = 1


def _pack_layer(layer: LayerWeights) -> bytes:
    rows, cols = layer.weight.shape
    return (
        struct.pack("<II", rows, cols)
        + layer.weight.astype("<f8").tobytes(order="C")
        + layer.bias.astype("<f8").tobytes()
    )


def dumps(model: Model) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(model.feature_layers))]
    parts += [_pack_layer(l) for l in model.feature_layers]
    parts.append(struct.pack("<I", len(model.heads)))
    parts += [_pack_layer(h) for h in model.heads]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated checkpoint: need {n} bytes for {what}, {len(self.buf) - self.pos} left", self.pos
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def layer(self, what: str) -> LayerWeights:
        rows = self.u32(f"{what} rows")
        cols = self.u32(f"{what} cols")
        if rows == 0 or cols == 0:
            raise FormatError(f"{what} has an empty shape ({rows}x{cols})", self.pos - 8)
        w = np.frombuffer(self.take(8 * rows * cols, f"{what} weights"), dtype="<f8").reshape(rows, cols)
        b = np.frombuffer(self.take(8 * rows, f"{what} bias"), dtype="<f8")
        return LayerWeights(w.astype(np.float64), b.astype(np.float64))


def loads(buf: bytes) -> Model:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}, expected {VERSION}", 4)
    layers = [r.layer(f"layer {i}") for i in range(r.u32("layer count"))]
    heads = [r.layer(f"head {i}") for i in range(r.u32("head count"))]
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after checkpoint", r.pos)
    try:
        return Model(layers, heads)
    except ValueError as exc:
        raise FormatError(f"inconsistent layer shapes: {exc}") from exc


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_checkpoint(path) -> Model:
    return loads(Path(path).read_bytes())


def _layer_dict(layer: LayerWeights) -> dict:
    return {"weight": layer.weight.tolist(), "bias": layer.bias.tolist()}


def dump_text(model: Model) -> str:
    """JSON mirror of the binary checkpoint, for reading and diffing."""
    doc = {
        "magic": MAGIC.decode(),
        "version": VERSION,
        "architecture": model.architecture(),
        "feature_layers": [_layer_dict(l) for l in model.feature_layers],
        "heads": [_layer_dict(h) for h in model.heads],
    }
    return json.dumps(doc, indent=1)


def load_text(text: str) -> Model:
    doc = json.loads(text)
    if doc.get("magic") != MAGIC.decode():
        raise FormatError(f"bad magic {doc.get('magic')!r}, expected {MAGIC.decode()!r}")
    if doc.get("version") != VERSION:
        raise FormatError(f"unsupported checkpoint version {doc.get('version')}, expected {VERSION}")
    layers = [LayerWeights(np.array(d["weight"]), np.array(d["bias"])) for d in doc["feature_layers"]]
    heads = [LayerWeights(np.array(d["weight"]), np.array(d["bias"])) for d in doc["heads"]]
    return Model(layers, heads)
