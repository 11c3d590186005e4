"""Binary checkpoints.

Layout (little-endian)::

    "ACMP"  u32 version=1  u32 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 rank, rank x u64 dims, float64 payload
    u32 mask_count
    per mask:   u16 name_len, name (UTF-8), u8 rank, rank x u64 dims, bit-packed booleans
    u32 metadata_len, metadata as UTF-8 ``key=value`` lines

The layer structure travels in the ``network`` metadata entry (JSON), so a
compacted network round-trips as well as a dense one.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .models import Layer, Network
from .schemes import LayerMask, MaskSet

MAGIC = b"ACMP"
VERSION = 1
NETWORK_KEY = "network"
DROP_BIAS_KEY = "masks_drop_bias"


@dataclass
class Checkpoint:
    network: Network
    masks: MaskSet | None
    metadata: dict


def _entry(name, dims):
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw + struct.pack(f"<B{len(dims)}Q", len(dims), *dims)


def _structure(network):
    layers = [
        {"kind": l.kind, "in_channels": l.in_channels, "kernel": list(l.kernel), "stride": l.stride,
         "pad": l.pad, "size": l.size, "compact": l.columns is not None}
        for l in network.layers
    ]
    return json.dumps({"arch": network.arch, "input_shape": list(network.input_shape),
                       "num_classes": network.num_classes, "layers": layers}, separators=(",", ":"))


def encode(network, masks=None, metadata=None):
    masks = network.masks if masks is None else masks
    tensors = []
    for i in network.weighted_indices():
        layer = network.layers[i]
        tensors.append((f"layers.{i}.weight", layer.weight))
        tensors.append((f"layers.{i}.bias", layer.bias))
        if layer.columns is not None:
            tensors.append((f"layers.{i}.columns", np.asarray(layer.columns, dtype=np.float64)))
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out += [_entry(name, arr.shape), arr.tobytes()]
    mask_items = []
    if masks is not None:
        for i in sorted(masks.layers):
            m = masks.layers[i]
            mask_items += [(f"layers.{i}.filters", m.filters), (f"layers.{i}.columns", m.columns)]
    out.append(struct.pack("<I", len(mask_items)))
    for name, arr in mask_items:
        out += [_entry(name, arr.shape), np.packbits(arr.astype(bool).ravel()).tobytes()]
    meta = dict(metadata or {})
    meta[NETWORK_KEY] = _structure(network)
    if masks is not None:
        meta[DROP_BIAS_KEY] = "1" if masks.drop_bias else "0"
    lines = []
    for k, v in meta.items():
        v = str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"metadata entry {k!r} cannot contain '=' in the key or newlines")
        lines.append(f"{k}={v}")
    text = "\n".join(lines).encode("utf-8")
    out += [struct.pack("<I", len(text)), text]
    return b"".join(out)


def save_checkpoint(network, masks, metadata, path):
    """Write atomically: a crash mid-write leaves any previous file intact."""
    path = Path(path)
    blob = encode(network, masks, metadata)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return len(blob)


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated while reading {what}", offset=len(self.raw))
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def header(self, what):
        (n,) = self.unpack("<H", what)
        start = self.pos
        try:
            name = self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} name is not UTF-8", offset=start) from None
        (rank,) = self.unpack("<B", what)
        dims = self.unpack(f"<{rank}Q", what) if rank else ()
        return name, tuple(int(d) for d in dims)


def decode(raw):
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", offset=4)
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        name, dims = r.header("tensor")
        n = int(np.prod(dims)) if dims else 1
        tensors[name] = np.frombuffer(r.take(8 * n, f"tensor {name}"), dtype="<f8").reshape(dims).astype(np.float64)
    (count,) = r.unpack("<I", "mask count")
    masks = {}
    for _ in range(count):
        name, dims = r.header("mask")
        n = int(np.prod(dims)) if dims else 1
        bits = np.frombuffer(r.take((n + 7) // 8, f"mask {name}"), dtype=np.uint8)
        masks[name] = np.unpackbits(bits)[:n].astype(bool).reshape(dims)
    (n,) = r.unpack("<I", "metadata length")
    start = r.pos
    try:
        text = r.take(n, "metadata").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("metadata is not UTF-8", offset=start) from None
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes", offset=r.pos)
    meta = {}
    for line in text.split("\n") if text else []:
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"metadata line without '=': {line!r}", offset=start)
        meta[key] = value
    if NETWORK_KEY not in meta:
        raise FormatError("metadata lacks the network structure entry", offset=start)
    return tensors, masks, meta


def _rebuild(structure, tensors, masks, drop_bias=False):
    s = json.loads(structure)
    layers = []
    for i, spec in enumerate(s["layers"]):
        layer = Layer(spec["kind"], in_channels=spec["in_channels"], kernel=tuple(spec["kernel"]),
                      stride=spec["stride"], pad=spec["pad"], size=spec["size"])
        if layer.weighted:
            try:
                layer.weight = tensors[f"layers.{i}.weight"]
                layer.bias = tensors[f"layers.{i}.bias"]
                if spec["compact"]:
                    layer.columns = tensors[f"layers.{i}.columns"].astype(np.intp)
            except KeyError as exc:
                raise FormatError(f"missing tensor {exc.args[0]}") from None
        layers.append(layer)
    mask_layers = {}
    for name, arr in masks.items():
        _, idx, part = name.split(".")
        entry = mask_layers.setdefault(int(idx), {})
        entry[part] = arr
    maskset = MaskSet({i: LayerMask(m["filters"], m["columns"]) for i, m in sorted(mask_layers.items())},
                      drop_bias) if mask_layers else None
    net = Network(layers, tuple(s["input_shape"]), s["num_classes"], arch=s["arch"], masks=maskset)
    return net, maskset


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    tensors, masks, meta = decode(raw)
    structure = meta.pop(NETWORK_KEY)
    drop_bias = meta.pop(DROP_BIAS_KEY, "0") == "1"
    net, maskset = _rebuild(structure, tensors, masks, drop_bias)
    return Checkpoint(net, maskset, meta)
