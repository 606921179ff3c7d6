"""On-disk formats: the array container, PGM images and JSONL/JSON helpers.

Container layout::

    b"SPAR" | uint32 version | uint32 header length | JSON header | raw data

The header lists every array as ``{"name", "shape", "dtype"}``; data follows
in that order, little-endian, row-major.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

MAGIC = b"SPAR"
VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


def save_container(path, kind, arrays, meta=None, dtype="<f8"):
    entries = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=_DTYPES[dtype]))
        entries.append({"name": name, "shape": list(a.shape), "dtype": dtype})
        blobs.append(a.tobytes(order="C"))
    header = json.dumps({"kind": kind, "meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_container(path, kind=None):
    """Return ``(arrays, meta)``; checks the kind when one is given."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ParseError(f"{path}: not an array container")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ParseError(f"{path}: unsupported container version {version}")
    header = json.loads(data[12 : 12 + hlen])
    if kind is not None and header["kind"] != kind:
        raise ContractError(f"{path}: expected a '{kind}' container, found '{header['kind']}'")
    offset = 12 + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.float64)
        offset += count * dt.itemsize
    return arrays, header["meta"]


def save_image_batch(path, images, meta=None):
    save_container(path, "images", {"images": images}, meta, dtype="<f4")


def load_image_batch(path):
    arrays, meta = load_container(path, "images")
    return arrays["images"], meta


def write_pgm(path, image):
    """Write a [0, 1] float image as 8-bit binary PGM (P5)."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ContractError("PGM images must be 2-D")
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pix.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pix.reshape(h, w).astype(float) / maxval


def checksum(arrays):
    """SHA-256 over names, shapes and float64 bytes of a parameter dict."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
