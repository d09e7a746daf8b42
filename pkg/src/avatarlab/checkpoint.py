"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"AVLBCKPT"
    uint32    format version
    uint32    header length in bytes
    header    UTF-8 JSON: {"kind", "meta", "arrays": [{"name", "shape"}, ...]}
    payload   arrays in header order, each as little-endian float32

The header is written with sorted keys so that identical parameters always
produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"AVLBCKPT"
FORMAT_VERSION = 1


def save_container(path, kind, meta, arrays):
    """Write named arrays plus a metadata dict to ``path``.

    ``arrays`` is a sequence of ``(name, array)`` pairs; order is preserved.
    """
    entries = []
    payload = []
    for name, arr in arrays:
        arr = np.asarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr).tobytes())
    header = json.dumps(
        {"kind": kind, "meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)
    return path


def load_container(path, kind=None):
    """Read a container; returns ``(meta, {name: float32 array})``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint container")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise ContractError(f"{path}: expected a {kind!r} checkpoint, found {header['kind']!r}")
    offset = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        buf = raw[offset : offset + nbytes]
        if len(buf) != nbytes:
            raise ContractError(f"{path}: truncated payload at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ContractError(f"{path}: {len(raw) - offset} trailing bytes")
    return header["meta"], arrays


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_dict_arrays(module):
    """``(name, numpy array)`` pairs for every parameter and buffer, in declaration order."""
    return [(k, v.detach().cpu().double().numpy()) for k, v in module.state_dict().items()]


def load_state_arrays(module, arrays):
    import torch

    state = module.state_dict()
    missing = set(state) - set(arrays)
    extra = set(arrays) - set(state)
    if missing or extra:
        raise ContractError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
    new_state = {}
    for name, ref in state.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ContractError(f"shape mismatch for {name}: {arr.shape} vs {tuple(ref.shape)}")
        new_state[name] = torch.from_numpy(arr.astype(np.float64)).to(ref.dtype)
    module.load_state_dict(new_state)
    return module


def parameter_hash(module):
    """SHA-256 over the raw bytes of every tensor in the module's state dict."""
    h = hashlib.sha256()
    for name, value in module.state_dict().items():
        h.update(name.encode())
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
