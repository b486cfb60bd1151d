"""Binary checkpoint format.

Layout (all integers little-endian)::

    bytes 0-7   magic  b"DQMQCKPT"
    u16         format version (currently 1)
    u32         manifest length in bytes
    ...         UTF-8 JSON manifest (sorted keys, compact separators)
    ...         float32 little-endian payload, tensors in manifest order

The manifest lists every tensor as ``{"name", "layer", "shape"}``; loading
checks the payload against those shapes and names the first tensor that
cannot be filled.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadMagicError, PayloadLengthError, TruncatedFileError, VersionMismatchError
from .model import LayerSpec, Model, make_config
from .tensor import Tensor

MAGIC = b"DQMQCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sHI")


def encode(manifest: dict, tensors: list) -> bytes:
    """``tensors`` is a list of ``(name, layer, array)``; shapes go into the manifest."""
    manifest = dict(manifest)
    manifest["tensors"] = [{"name": n, "layer": l, "shape": list(np.shape(a))} for n, l, a in tensors]
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, _, a in tensors)
    return _HEADER.pack(MAGIC, VERSION, len(body)) + body + payload


def decode(blob: bytes) -> tuple[dict, dict]:
    """Returns ``(manifest, {tensor name: float32 array})``."""
    if len(blob) < _HEADER.size:
        if blob[:len(MAGIC)] != MAGIC[:len(blob)]:
            raise BadMagicError("bad magic")
        raise TruncatedFileError(f"truncated header: {len(blob)} bytes")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    start = _HEADER.size
    if len(blob) < start + mlen:
        raise TruncatedFileError("truncated manifest")
    manifest = json.loads(blob[start:start + mlen].decode("utf-8"))
    offset = start + mlen
    arrays = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"]))
        nbytes = 4 * count
        if offset + nbytes > len(blob):
            raise PayloadLengthError(
                f"payload length mismatch at tensor {entry['name']} (layer {entry['layer']}): "
                f"needs {nbytes} bytes, {len(blob) - offset} left", layer=entry["layer"])
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        arrays[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])
        offset += nbytes
    if offset != len(blob):
        raise PayloadLengthError(f"payload length mismatch: {len(blob) - offset} trailing bytes")
    return manifest, arrays


def model_manifest(model: Model, bits=None, metadata: Optional[dict] = None) -> dict:
    return {
        "model": {"config": model.config, "layers": [s.to_dict() for s in model.layers],
                  "residual": model.residual},
        "bits": None if bits is None else [int(b) for b in bits],
        "seed": int(model.seed),
        "metadata": metadata or {},
    }


def to_bytes(model: Model, bits=None, policy=None, metadata: Optional[dict] = None) -> bytes:
    manifest = model_manifest(model, bits, metadata)
    tensors = [(n, l, t.data) for n, l, t in model.named_tensors()]
    if policy is not None:
        manifest["policy"] = policy.manifest()
        tensors += [(n, l, t.data) for n, l, t in policy.named_tensors()]
    return encode(manifest, tensors)


def model_from(manifest: dict, arrays: dict) -> Model:
    m = manifest["model"]
    layers = [LayerSpec.from_dict(d) for d in m["layers"]]
    weights = {s.name: Tensor(arrays[f"{s.name}.weight"], requires_grad=True) for s in layers}
    biases = {s.name: Tensor(arrays[f"{s.name}.bias"], requires_grad=True) for s in layers}
    return Model(make_config(m["config"]), layers, m["residual"], weights, biases, manifest.get("seed", 0))


def from_bytes(blob: bytes):
    """Returns ``(model, policy or None, manifest)``."""
    manifest, arrays = decode(blob)
    model = model_from(manifest, arrays)
    policy = None
    if manifest.get("policy") is not None:
        from .policy import Policy

        policy = Policy.from_manifest(manifest["policy"], arrays)
    return model, policy, manifest


def save_checkpoint(model: Model, path, bits=None, policy=None, metadata: Optional[dict] = None) -> bytes:
    blob = to_bytes(model, bits, policy, metadata)
    Path(path).write_bytes(blob)
    return blob


def load_checkpoint(path) -> Model:
    return from_bytes(Path(path).read_bytes())[0]


def load_bundle(path):
    return from_bytes(Path(path).read_bytes())
