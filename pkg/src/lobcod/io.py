"""File formats: dictionaries (LBCD), needle dumps (LBNF), PGM images, checkpoints.

All binary formats are little-endian.

LBCD: ``b"LBCD"``, u32 version (=1), u32 filter_side, u32 num_filters, then
the ``n x m`` atoms as float64 in column-major order.

LBNF: ``b"LBNF"``, u32 version (=1), u32 height, u32 width, u32 filter_side,
u32 num_filters, then for every needle position in row-major order a u32
count followed by ``count`` packed records ``(u16 filter index, f64 value)``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .core import LocalDictionary, NeedleField
from .errors import ConfigError

DICT_MAGIC = b"LBCD"
NEEDLE_MAGIC = b"LBNF"
VERSION = 1

_RECORD = np.dtype([("index", "<u2"), ("value", "<f8")])


class FormatError(ConfigError):
    """A file does not follow the expected layout."""


# -- dictionaries -------------------------------------------------------------------

def dictionary_to_bytes(dictionary: LocalDictionary) -> bytes:
    head = DICT_MAGIC + struct.pack("<III", VERSION, dictionary.filter_side, dictionary.num_filters)
    return head + np.asarray(dictionary.atoms, dtype="<f8").tobytes(order="F")


def dictionary_from_bytes(data: bytes) -> LocalDictionary:
    if len(data) < 16 or data[:4] != DICT_MAGIC:
        raise FormatError("not an LBCD dictionary file")
    version, s, m = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported LBCD version {version}")
    n = s * s
    if len(data) != 16 + 8 * n * m:
        raise FormatError(f"LBCD payload has {len(data) - 16} bytes, expected {8 * n * m}")
    atoms = np.frombuffer(data, dtype="<f8", offset=16).reshape((n, m), order="F")
    return LocalDictionary(atoms.astype(np.float64))


def write_dictionary(path, dictionary: LocalDictionary) -> None:
    Path(path).write_bytes(dictionary_to_bytes(dictionary))


def read_dictionary(path) -> LocalDictionary:
    return dictionary_from_bytes(Path(path).read_bytes())


# -- needle dumps -----------------------------------------------------------------------

def needles_to_bytes(needles: NeedleField) -> bytes:
    p, q = needles.grid_shape
    m = needles.num_filters
    if m > 65536:
        raise FormatError("LBNF stores filter indices as u16")
    flat = needles.coeffs.reshape(p * q, m)
    nz = flat != 0
    counts = np.count_nonzero(nz, axis=1).astype("<u4")
    pos, idx = np.nonzero(nz)
    recs = np.empty(pos.size, dtype=_RECORD)
    recs["index"] = idx
    recs["value"] = flat[pos, idx]
    # interleave: each position's count followed by its records
    ends = np.cumsum(counts)
    parts = [NEEDLE_MAGIC, struct.pack("<IIIII", VERSION, needles.height, needles.width,
                                       needles.filter_side, m)]
    start = 0
    for k in range(p * q):
        parts.append(counts[k:k + 1].tobytes())
        parts.append(recs[start:ends[k]].tobytes())
        start = ends[k]
    return b"".join(parts)


def needles_from_bytes(data: bytes) -> NeedleField:
    if len(data) < 24 or data[:4] != NEEDLE_MAGIC:
        raise FormatError("not an LBNF needle file")
    version, h, w, s, m = struct.unpack_from("<IIIII", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported LBNF version {version}")
    nf = NeedleField.zeros(h, w, s, m)
    p, q = nf.grid_shape
    flat = nf.coeffs.reshape(p * q, m)
    off = 24
    try:
        for k in range(p * q):
            (cnt,) = struct.unpack_from("<I", data, off)
            off += 4
            if cnt:
                recs = np.frombuffer(data, dtype=_RECORD, count=cnt, offset=off)
                off += cnt * _RECORD.itemsize
                if np.any(recs["index"] >= m):
                    raise FormatError(f"filter index out of range at position {k}")
                flat[k, recs["index"]] = recs["value"]
    except (struct.error, ValueError) as err:
        raise FormatError(f"truncated LBNF file: {err}") from None
    if off != len(data):
        raise FormatError("trailing bytes after LBNF payload")
    return nf


def needle_file_size(needles: NeedleField) -> int:
    p, q = needles.grid_shape
    return 24 + 4 * p * q + _RECORD.itemsize * needles.nnz()


def write_needles(path, needles: NeedleField) -> None:
    Path(path).write_bytes(needles_to_bytes(needles))


def read_needles(path) -> NeedleField:
    return needles_from_bytes(Path(path).read_bytes())


# -- PGM --------------------------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace separated header tokens, skipping comments."""
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated PGM header")
        tokens.append(data[i:j])
        i = j
    return tokens, i + 1  # exactly one whitespace byte before the raster


def read_pgm(path) -> np.ndarray:
    """Binary (P5) PGM as float64; 16-bit files are big-endian per the format."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), off = _pgm_tokens(data, 4)
    if magic != b"P5":
        raise FormatError(f"{path}: only binary PGM (P5) is supported")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad maxval {maxval}")
    dt = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    raster = data[off:off + w * h * dt.itemsize]
    if len(raster) != w * h * dt.itemsize:
        raise FormatError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=dt).reshape(h, w).astype(np.float64)


def to_uint8(plane) -> np.ndarray:
    return np.clip(np.rint(np.asarray(plane, dtype=np.float64)), 0, 255).astype(np.uint8)


def write_pgm(path, plane) -> None:
    """Quantize to 8 bits (round, clip to [0, 255]) and write a P5 file."""
    img = to_uint8(plane)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def list_pgms(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"{directory} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".pgm" and p.is_file())


# -- checkpoints --------------------------------------------------------------------------

def write_checkpoint(path, dictionary: LocalDictionary, *, epoch: int, optimizer: str,
                     eta: float, seed: int, **extra) -> None:
    """Dictionary file plus ``<path>.json`` with the training state."""
    write_dictionary(path, dictionary)
    meta = {"epoch": int(epoch), "optimizer": optimizer, "eta": float(eta), "seed": int(seed)}
    meta.update(extra)
    with open(os.fspath(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_checkpoint(path):
    with open(os.fspath(path) + ".json") as fh:
        meta = json.load(fh)
    return read_dictionary(path), meta
