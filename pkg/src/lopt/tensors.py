"""Dense f32 tensor substrate and the named-tensor container file.

ParamTensor is deliberately minimal: rank <= 2, float32, row-major. Vectors
are stored as m x 1 and scalars as 1 x 1 so that row/column factored
accumulators are always well defined.

The container format ("PYLO") is a small self-describing binary file used for
optimizer weights and checkpoints:

    magic       4 bytes  b"PYLO"
    version     u32 LE   currently 1
    header_len  u64 LE   byte length of the JSON header
    header      UTF-8 JSON: {"entries": [{"name", "dtype", "shape", "offset",
                              "nbytes"}, ...], "meta": {str: str}}
    payload     raw little-endian buffers, each offset 8-byte aligned,
                offsets relative to the start of the payload section

Round-trips are bit-exact. Errors are typed so callers can distinguish an
unsupported version from a truncated or corrupted file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"PYLO"
FORMAT_VERSION = 1

# dtypes permitted in container files; little-endian on disk
_DTYPE_TAGS = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i64": np.dtype("<i8"),
}
_TAG_FOR_KIND = {("f", 4): "f32", ("f", 8): "f64", ("i", 8): "i64"}

# refuse absurd shapes before numpy tries to allocate them
MAX_ELEMENTS = 1 << 40


class TensorError(ValueError):
    """Invalid tensor construction or update."""


class FileFormatError(Exception):
    """Base class for container file problems."""


class VersionMismatchError(FileFormatError):
    """Container written with an unsupported format version."""


class TruncatedFileError(FileFormatError):
    """File ends before the declared header or payload does."""


class MalformedHeaderError(FileFormatError):
    """Header is not valid JSON or is structurally wrong."""


@dataclass
class ParamTensor:
    """A dense (m, n) float32 matrix, row-major and C-contiguous."""

    data: np.ndarray

    def __init__(self, data: np.ndarray):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise TensorError(f"rank {arr.ndim} tensor not supported (max rank 2)")
        if not np.isfinite(arr).all():
            raise TensorError("non-finite values in tensor")
        self.data = arr

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "ParamTensor":
        return ParamTensor(self.data.copy())


def tensor_new(m: int, n: int, fill: float) -> ParamTensor:
    """Create an m x n tensor filled with a constant."""
    if m < 0 or n < 0:
        raise TensorError(f"negative dimensions ({m}, {n})")
    if m * n > MAX_ELEMENTS:
        raise TensorError(f"{m} x {n} exceeds the element limit")
    if not np.isfinite(fill):
        raise TensorError("fill value must be finite")
    return ParamTensor(np.full((m, n), fill, dtype=np.float32))


def _dtype_tag(arr: np.ndarray) -> str:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _TAG_FOR_KIND:
        raise TensorError(f"dtype {arr.dtype} not supported by the container format")
    return _TAG_FOR_KIND[key]


def file_save(entries: dict[str, np.ndarray], meta: dict[str, str], path) -> None:
    """Write named arrays plus string metadata to a container file.

    Names must be unique (dict input enforces that). Payloads are written
    little-endian at 8-byte aligned offsets; file_load reproduces them
    bit-exactly.
    """
    records = []
    offset = 0
    bufs = []
    for name, arr in entries.items():
        if not isinstance(name, str) or not name:
            raise TensorError(f"bad entry name {name!r}")
        a = np.asarray(arr)
        shape = a.shape  # ascontiguousarray would widen 0-d to (1,)
        a = np.ascontiguousarray(a)
        tag = _dtype_tag(a)
        le = a.astype(_DTYPE_TAGS[tag], copy=False)
        offset = (offset + 7) & ~7
        records.append(
            {
                "name": name,
                "dtype": tag,
                "shape": list(shape),
                "offset": offset,
                "nbytes": le.nbytes,
            }
        )
        bufs.append((offset, le.tobytes()))
        offset += le.nbytes
    header = json.dumps(
        {"entries": records, "meta": {str(k): str(v) for k, v in meta.items()}},
        ensure_ascii=False,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        payload_start = f.tell()
        for off, raw in bufs:
            f.seek(payload_start + off)
            f.write(raw)
        # pad so every declared extent exists even when the last buffer is empty
        f.seek(payload_start + offset)
        f.truncate()


def file_load(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read a container file back into (entries, meta).

    Raises VersionMismatchError, TruncatedFileError or MalformedHeaderError
    depending on what is wrong with the file.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise TruncatedFileError(f"{path}: file shorter than the fixed preamble")
    if blob[:4] != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic bytes {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, supported version {FORMAT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    if len(blob) < header_end:
        raise TruncatedFileError(f"{path}: header extends past end of file")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeaderError(f"{path}: header is not valid JSON: {e}") from e
    if not isinstance(header, dict) or "entries" not in header or "meta" not in header:
        raise MalformedHeaderError(f"{path}: header missing required keys")

    entries: dict[str, np.ndarray] = {}
    payload = blob[header_end:]
    for rec in header["entries"]:
        try:
            name = rec["name"]
            tag = rec["dtype"]
            shape = tuple(int(s) for s in rec["shape"])
            off = int(rec["offset"])
            nbytes = int(rec["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedHeaderError(f"{path}: bad entry record {rec!r}") from e
        if tag not in _DTYPE_TAGS:
            raise MalformedHeaderError(f"{path}: unknown dtype tag {tag!r}")
        if name in entries:
            raise MalformedHeaderError(f"{path}: duplicate entry name {name!r}")
        dt = _DTYPE_TAGS[tag]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if count * dt.itemsize != nbytes:
            raise MalformedHeaderError(
                f"{path}: entry {name!r} shape {shape} disagrees with {nbytes} bytes"
            )
        if off % 8 != 0:
            raise MalformedHeaderError(f"{path}: entry {name!r} offset not 8-byte aligned")
        if off + nbytes > len(payload):
            raise TruncatedFileError(f"{path}: payload for {name!r} extends past end of file")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=off).reshape(shape)
        entries[name] = arr.copy()
    meta = {str(k): str(v) for k, v in header["meta"].items()}
    return entries, meta
