"""Versioned binary container for network parameters.

Layout::

    b"WKDM"                  magic
    uint32 little-endian     format version
    uint64 little-endian     header length in bytes
    header                   UTF-8 JSON (sorted keys)
    payload                  float64 little-endian tensors, row-major

The header lists every tensor with its name, shape and byte offset into the
payload, plus free-form topology and metadata sections. Writing the same
objects twice yields byte-identical files.
"""
import json
import struct

import numpy as np

MAGIC = b"WKDM"
FORMAT_VERSION = 1


def pack(tensors, topology=None, meta=None):
    """Serialize ``{name: array}`` plus JSON-able sections to bytes."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        raw = data.tobytes(order="C")
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": "windkd-model",
        "version": FORMAT_VERSION,
        "tensors": entries,
        "topology": topology or {},
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def unpack(blob):
    """Inverse of :func:`pack`; returns ``(tensors, topology, meta)``."""
    if blob[:4] != MAGIC:
        raise ValueError("not a windkd model container")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    payload = memoryview(blob)[16 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(payload[start:start + 8 * count], dtype="<f8").astype(np.float64)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return tensors, header["topology"], header["meta"]


def net_tensors(net, prefix=""):
    return {prefix + p.name: p.value for p in net.params()}


def load_net_tensors(net, tensors, prefix=""):
    for p in net.params():
        key = prefix + p.name
        if key not in tensors:
            raise KeyError(f"container has no tensor {key!r}")
        if tensors[key].shape != p.value.shape:
            raise ValueError(f"shape mismatch for {key}: {tensors[key].shape} vs {p.value.shape}")
        p.value[...] = tensors[key]


def save(path, tensors, topology=None, meta=None):
    with open(path, "wb") as fh:
        fh.write(pack(tensors, topology, meta))


def load(path):
    with open(path, "rb") as fh:
        return unpack(fh.read())
