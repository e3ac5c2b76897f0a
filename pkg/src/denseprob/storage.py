"""Binary containers for datasets, checkpoints and predictions.

All containers are little-endian and begin with an 8-byte magic string
followed by a ``uint32`` format version.

Triplet file (``.trip``)::

    magic "DPTRIP\\0\\0" | version u32 | H u32 | W u32 | C u32
    reference  float32[H*W*C]   (row-major, channels last)
    query      float32[H*W*C]
    flow       float32[H*W*2]   (u, v)
    mask       uint8[ceil(H*W/8)]  (np.packbits, big bit order)

Checkpoint file (``.ckpt``)::

    magic "DPCKPT\\0\\0" | version u32 | header_len u32 | header (UTF-8 JSON)
    float32 arrays in the order listed under header["arrays"]

The header carries the network configuration and ``{"name", "shape"}`` for
each array.

Prediction file (``.pred``)::

    magic "DPPRED\\0\\0" | version u32 | H u32 | W u32 | has_conf u32
    flow float32[H*W*2] | confidence float32[H*W] (when has_conf)
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .datagen import SampleTriplet
from .network import NetConfig, PyramidNet

VERSION = 1
TRIP_MAGIC = b"DPTRIP\0\0"
CKPT_MAGIC = b"DPCKPT\0\0"
PRED_MAGIC = b"DPPRED\0\0"


class ContainerError(ValueError):
    pass


def _f32(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _check_magic(buf, magic, path):
    if buf[:8] != magic:
        raise ContainerError(f"{path}: not a {magic[:6].decode()} container")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")


# ---------------------------------------------------------------- triplets
def encode_triplet(t: SampleTriplet) -> bytes:
    H, W, C = t.ref.shape
    parts = [TRIP_MAGIC, struct.pack("<IIII", VERSION, H, W, C),
             _f32(t.ref), _f32(t.query), _f32(t.flow), np.packbits(np.asarray(t.valid, bool).ravel()).tobytes()]
    return b"".join(parts)


def decode_triplet(buf: bytes, path="<bytes>") -> SampleTriplet:
    _check_magic(buf, TRIP_MAGIC, path)
    H, W, C = struct.unpack_from("<III", buf, 12)
    expect = 24 + 4 * H * W * (2 * C + 2) + (H * W + 7) // 8
    if len(buf) != expect:
        raise ContainerError(f"{path}: {len(buf)} bytes, expected {expect}")
    off = 24
    arrays = []
    for shape in ((H, W, C), (H, W, C), (H, W, 2)):
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(buf, "<f4", n, off).reshape(shape).astype(np.float32))
        off += 4 * n
    nbits = H * W
    mask = np.unpackbits(np.frombuffer(buf, np.uint8, (nbits + 7) // 8, off))[:nbits].reshape(H, W).astype(bool)
    return SampleTriplet(arrays[0], arrays[1], arrays[2], mask)


def write_triplet(path, t: SampleTriplet):
    with open(path, "wb") as fh:
        fh.write(encode_triplet(t))


def read_triplet(path) -> SampleTriplet:
    with open(path, "rb") as fh:
        return decode_triplet(fh.read(), path)


def triplet_name(i: int) -> str:
    return f"{i:06d}.trip"


def write_manifest(directory, count, extra=None):
    man = {"version": VERSION, "count": int(count), "files": [triplet_name(i) for i in range(count)]}
    if extra:
        man.update(extra)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(directory):
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def load_dataset(directory, limit=None):
    """Read every triplet listed in a manifest into stacked arrays."""
    from .training import Dataset

    man = read_manifest(directory)
    files = man["files"][:limit] if limit else man["files"]
    trips = [read_triplet(os.path.join(directory, f)) for f in files]
    if not trips:
        return Dataset(np.zeros((0, 1, 1, 1), np.float32), np.zeros((0, 1, 1, 1), np.float32),
                       np.zeros((0, 1, 1, 2), np.float32), np.zeros((0, 1, 1), bool))
    return Dataset(np.stack([t.ref for t in trips]), np.stack([t.query for t in trips]),
                   np.stack([t.flow for t in trips]), np.stack([t.valid for t in trips]))


# -------------------------------------------------------------- checkpoints
def encode_checkpoint(net: PyramidNet) -> bytes:
    arrays = net.named_arrays()
    cfg = net.config.to_dict()
    header = {"net_config": cfg, "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays]}
    hb = json.dumps(header, sort_keys=True).encode()
    return b"".join([CKPT_MAGIC, struct.pack("<II", VERSION, len(hb)), hb] + [_f32(a) for _, a in arrays])


def decode_checkpoint(buf: bytes, path="<bytes>") -> PyramidNet:
    _check_magic(buf, CKPT_MAGIC, path)
    (hlen,) = struct.unpack_from("<I", buf, 12)
    header = json.loads(buf[16:16 + hlen].decode())
    net = PyramidNet(NetConfig(**header["net_config"]))
    own = dict(net.named_arrays())
    off = 16 + hlen
    for entry in header["arrays"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in own or own[name].shape != shape:
            raise ContainerError(f"{path}: array {name} {shape} does not fit the network")
        n = int(np.prod(shape))
        own[name][...] = np.frombuffer(buf, "<f4", n, off).reshape(shape)
        off += 4 * n
    if off != len(buf):
        raise ContainerError(f"{path}: trailing bytes")
    return net


def save_checkpoint(path, net: PyramidNet):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(net))


def load_checkpoint(path) -> PyramidNet:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), path)


# -------------------------------------------------------------- predictions
def write_prediction(path, flow, confidence=None):
    H, W = flow.shape[:2]
    parts = [PRED_MAGIC, struct.pack("<IIII", VERSION, H, W, int(confidence is not None)), _f32(flow)]
    if confidence is not None:
        parts.append(_f32(confidence))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_prediction(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    _check_magic(buf, PRED_MAGIC, path)
    H, W, has = struct.unpack_from("<III", buf, 12)
    flow = np.frombuffer(buf, "<f4", H * W * 2, 24).reshape(H, W, 2)
    conf = np.frombuffer(buf, "<f4", H * W, 24 + 8 * H * W).reshape(H, W) if has else None
    return flow, conf
