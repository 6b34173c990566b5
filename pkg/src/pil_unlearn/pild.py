"""Reader/writer for the little-endian "PILD" container.

Layout of the common header (39 bytes)::

    magic     4s   b"PILD"
    version   u16  1
    kind      u8   0=dataset 1=perturbations 2=linear weights 3=mlp model
    dtype     u8   0=f32 1=u8
    n         u64
    channels  u16
    height    u16
    width     u16
    k         u16
    epsilon   f32  (0 for anything but perturbations)
    seed      u64

Datasets follow the header with ``n`` label bytes, then the row-major payload.
Weights append ``d u64, k u16`` before their payload.  Models append a layer
manifest (``u16`` array count, then per array ``u8`` ndim and ``u64`` dims)
followed by each array's payload in manifest order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PILD"
VERSION = 1

KIND_DATASET = 0
KIND_PERTURBATIONS = 1
KIND_WEIGHTS = 2
KIND_MODEL = 3
_KINDS = (KIND_DATASET, KIND_PERTURBATIONS, KIND_WEIGHTS, KIND_MODEL)

DTYPE_F32 = 0
DTYPE_U8 = 1
_NP_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}

_HEADER = struct.Struct("<4sHBBQHHHHfQ")


@dataclass(frozen=True)
class Header:
    kind: int
    dtype: int
    n: int
    channels: int
    height: int
    width: int
    k: int
    epsilon: float
    seed: int
    version: int = VERSION

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.kind, self.dtype, self.n,
                            self.channels, self.height, self.width, self.k,
                            self.epsilon, self.seed)


def read_header(buf: bytes, path: Path | str = "<buffer>") -> Header:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: header: file shorter than {_HEADER.size} bytes")
    magic, version, kind, dtype, n, c, h, w, k, eps, seed = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: magic: expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: version: unsupported format version {version}")
    if kind not in _KINDS:
        raise FormatError(f"{path}: kind: unknown payload kind {kind}")
    if dtype not in _NP_DTYPES:
        raise FormatError(f"{path}: dtype: unknown dtype code {dtype}")
    return Header(kind, dtype, n, c, h, w, k, float(eps), seed, version)


def _take(buf: bytes, offset: int, count: int, dtype: np.dtype, path, field: str):
    nbytes = count * dtype.itemsize
    if offset + nbytes > len(buf):
        raise FormatError(f"{path}: {field}: truncated payload "
                          f"(need {nbytes} bytes at offset {offset}, file has {len(buf)})")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    return arr, offset + nbytes


def _finish(buf: bytes, offset: int, path):
    if offset != len(buf):
        raise FormatError(f"{path}: payload: {len(buf) - offset} trailing bytes")


def write_rows(path, header: Header, payload: np.ndarray,
               labels: np.ndarray | None = None) -> None:
    """Write a dataset or perturbation container."""
    dt = _NP_DTYPES[header.dtype]
    with open(path, "wb") as fh:
        fh.write(header.pack())
        if labels is not None:
            fh.write(np.ascontiguousarray(labels, dtype="u1").tobytes())
        fh.write(np.ascontiguousarray(payload, dtype=dt).tobytes())


def read_rows(path, expect_kind: int):
    """Return ``(header, labels_or_None, payload)`` for kinds 0 and 1."""
    buf = Path(path).read_bytes()
    hdr = read_header(buf, path)
    if hdr.kind != expect_kind:
        raise FormatError(f"{path}: kind: expected {expect_kind}, got {hdr.kind}")
    d = hdr.channels * hdr.height * hdr.width
    if d == 0:
        raise FormatError(f"{path}: shape: zero-sized image dimension")
    off = _HEADER.size
    labels = None
    if hdr.kind == KIND_DATASET:
        labels, off = _take(buf, off, hdr.n, np.dtype("u1"), path, "labels")
    payload, off = _take(buf, off, hdr.n * d, _NP_DTYPES[hdr.dtype], path, "payload")
    _finish(buf, off, path)
    return hdr, labels, payload.reshape(hdr.n, d)


def write_weights(path, w: np.ndarray, seed: int = 0) -> None:
    d, k = w.shape
    hdr = Header(KIND_WEIGHTS, DTYPE_F32, n=d, channels=0, height=0, width=0,
                 k=k, epsilon=0.0, seed=seed)
    with open(path, "wb") as fh:
        fh.write(hdr.pack())
        fh.write(struct.pack("<QH", d, k))
        fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def read_weights(path) -> tuple[Header, np.ndarray]:
    buf = Path(path).read_bytes()
    hdr = read_header(buf, path)
    if hdr.kind != KIND_WEIGHTS:
        raise FormatError(f"{path}: kind: expected {KIND_WEIGHTS}, got {hdr.kind}")
    off = _HEADER.size
    if off + 10 > len(buf):
        raise FormatError(f"{path}: d: truncated weight dimensions")
    d, k = struct.unpack_from("<QH", buf, off)
    off += 10
    if d == 0 or k == 0 or k != hdr.k:
        raise FormatError(f"{path}: k: inconsistent weight dimensions d={d} k={k}")
    w, off = _take(buf, off, d * k, np.dtype("<f4"), path, "payload")
    _finish(buf, off, path)
    return hdr, w.reshape(d, k)


def write_arrays(path, arrays: list[np.ndarray], *, k: int, seed: int,
                 shape: tuple[int, int, int] = (0, 0, 0)) -> None:
    """Write a model container holding ``arrays`` in order."""
    hdr = Header(KIND_MODEL, DTYPE_F32, n=len(arrays), channels=shape[0],
                 height=shape[1], width=shape[2], k=k, epsilon=0.0, seed=seed)
    with open(path, "wb") as fh:
        fh.write(hdr.pack())
        fh.write(struct.pack("<H", len(arrays)))
        for a in arrays:
            fh.write(struct.pack("<B", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_arrays(path) -> tuple[Header, list[np.ndarray]]:
    buf = Path(path).read_bytes()
    hdr = read_header(buf, path)
    if hdr.kind != KIND_MODEL:
        raise FormatError(f"{path}: kind: expected {KIND_MODEL}, got {hdr.kind}")
    off = _HEADER.size
    try:
        (count,) = struct.unpack_from("<H", buf, off)
        off += 2
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shapes.append(struct.unpack_from(f"<{ndim}Q", buf, off))
            off += 8 * ndim
    except struct.error as exc:
        raise FormatError(f"{path}: manifest: truncated layer manifest") from exc
    arrays = []
    for i, shp in enumerate(shapes):
        a, off = _take(buf, off, int(np.prod(shp)), np.dtype("<f4"), path, f"array[{i}]")
        arrays.append(a.reshape(shp).copy())
    _finish(buf, off, path)
    return hdr, arrays
