"""Binary model files.

Layout (integers little-endian)::

    magic          8 bytes  b"PACRNNM\\x01"
    manifest_len   uint64
    manifest       UTF-8 JSON, keys sorted:
                     {"format": 1,
                      "kind": "pacrnn" | "frame-net",
                      "config": {...},             # PacRnnConfig or net layout
                      "layers": [{"name", "kind", "activation"?,
                                  "tensors": [{"name", "shape"}, ...]}, ...],
                      "extra": {...}}
    tensors        float64 little-endian, row-major, in manifest order

Every byte is a function of the parameters and manifest, so identical
models produce identical files.
"""

import hashlib
import json
import struct

import numpy as np

from .errors import FormatError
from .layers import AffineLayer, LstmCell, SoftmaxHead

MAGIC = b"PACRNNM\x01"


def _describe(layers):
    out = []
    for name, layer in layers.items():
        entry = {"name": name, "kind": layer.kind,
                 "tensors": [{"name": p, "shape": list(v.shape)}
                             for p, v in layer.params().items()]}
        if layer.kind == "affine":
            entry["activation"] = layer.activation
        out.append(entry)
    return out


def _kind_and_config(obj):
    from .model import Model
    if isinstance(obj, Model):
        return "pacrnn", obj.config.to_dict()
    return "frame-net", obj.layout()


def model_bytes(obj, extra=None):
    kind, config = _kind_and_config(obj)
    manifest = {"format": 1, "kind": kind, "config": config,
                "layers": _describe(obj.layers), "extra": extra or {}}
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(text)), text]
    for layer in obj.layers.values():
        for value in layer.params().values():
            chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(chunks)


def model_hash(obj):
    return hashlib.sha256(model_bytes(obj)).hexdigest()


def save_model(obj, path, extra=None):
    with open(path, "wb") as fh:
        fh.write(model_bytes(obj, extra))


def _rebuild(entry, tensors):
    kind = entry["kind"]
    if kind == "affine":
        return AffineLayer(tensors["weights"], tensors["bias"], entry.get("activation", "sigmoid"))
    if kind == "lstm":
        return LstmCell(tensors["input_weights"], tensors["recurrent_weights"], tensors["bias"])
    if kind == "softmax":
        return SoftmaxHead(tensors["weights"], tensors["bias"])
    raise FormatError(f"unknown layer kind {kind!r}")


def load_model(path):
    """Load a model file; returns (object, extra)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise FormatError("bad magic bytes; not a model file", 0)
    if len(blob) < 16:
        raise FormatError("truncated header", 8)
    (mlen,) = struct.unpack_from("<Q", blob, 8)
    off = 16
    if len(blob) < off + mlen:
        raise FormatError("truncated manifest", off)
    try:
        manifest = json.loads(blob[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}", off) from None
    off += mlen
    layers = {}
    for entry in manifest["layers"]:
        tensors = {}
        for t in entry["tensors"]:
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            if len(blob) < off + 8 * count:
                raise FormatError(f"truncated tensor {entry['name']}.{t['name']}", off)
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
            tensors[t["name"]] = arr.astype(np.float64).reshape(t["shape"])
            off += 8 * count
        layers[entry["name"]] = _rebuild(entry, tensors)
    if off != len(blob):
        raise FormatError("trailing bytes after the last tensor", off)
    if manifest["kind"] == "pacrnn":
        from .model import Model, PacRnnConfig
        obj = Model(PacRnnConfig.from_dict(manifest["config"]), layers)
    elif manifest["kind"] == "frame-net":
        from .multilingual import FrameNet
        obj = FrameNet.from_layout(manifest["config"], layers)
    else:
        raise FormatError(f"unknown model kind {manifest['kind']!r}")
    return obj, manifest.get("extra", {})
