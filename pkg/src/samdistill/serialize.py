"""Little-endian binary formats: tensors (SDT1), checkpoints (SDCK), datasets (SDDS).

SDT1: ``b"SDT1"``, u32 rank, rank x u64 dims, float64 payload (row-major).

SDCK: ``b"SDCK"``, u32 version, u32 + ascii config digest, u64 + utf-8 config
text, u32 entry count, then per entry u32 + utf-8 name and u64 + SDT1 blob.

SDDS: ``b"SDDS"``, u32 version, u64 sample count, u32 field count, field
names as u32 + utf-8, then per sample and field a u64 + SDT1 blob.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import BinaryIO, Iterator, Mapping, Sequence

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"SDT1"
CHECKPOINT_MAGIC = b"SDCK"
DATASET_MAGIC = b"SDDS"
CHECKPOINT_VERSION = 1
DATASET_VERSION = 1


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"unexpected end of file (wanted {n} bytes, got {len(buf)})")
    return buf


def _unpack(f: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt)))


def tensor_to_bytes(arr) -> bytes:
    data = arr if isinstance(arr, np.ndarray) else getattr(arr, "data", arr)
    a = np.asarray(data, dtype="<f8", order="C")
    head = TENSOR_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def write_tensor(f: BinaryIO, arr) -> None:
    f.write(tensor_to_bytes(arr))


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = _unpack(f, "<I")
    dims = _unpack(f, f"<{rank}Q") if rank else ()
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(f, 8 * count)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    f = io.BytesIO(buf)
    out = read_tensor(f)
    if f.read(1):
        raise FormatError("trailing bytes after tensor payload")
    return out


def _write_str(f: BinaryIO, s: str, wide: bool = False) -> None:
    raw = s.encode("utf-8")
    f.write(struct.pack("<Q" if wide else "<I", len(raw)))
    f.write(raw)


def _read_str(f: BinaryIO, wide: bool = False) -> str:
    (n,) = _unpack(f, "<Q" if wide else "<I")
    return _read_exact(f, n).decode("utf-8")


def _write_blob(f: BinaryIO, arr) -> None:
    blob = tensor_to_bytes(arr)
    f.write(struct.pack("<Q", len(blob)))
    f.write(blob)


def _read_blob(f: BinaryIO) -> np.ndarray:
    (n,) = _unpack(f, "<Q")
    return tensor_from_bytes(_read_exact(f, n))


def config_digest(config_text: str) -> str:
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, params: Mapping[str, np.ndarray], config_text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_str(f, config_digest(config_text))
        _write_str(f, config_text, wide=True)
        f.write(struct.pack("<I", len(params)))
        for name in params:
            _write_str(f, name)
            _write_blob(f, params[name])


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    """Return (named parameters, config text); the digest is verified."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
        (version,) = _unpack(f, "<I")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        digest = _read_str(f)
        text = _read_str(f, wide=True)
        if config_digest(text) != digest:
            raise FormatError(f"{path}: config digest mismatch")
        (count,) = _unpack(f, "<I")
        params = {}
        for _ in range(count):
            name = _read_str(f)
            params[name] = _read_blob(f)
    return params, text


# -- datasets --------------------------------------------------------------


def write_dataset(path, fields: Sequence[str], samples: Sequence[Mapping[str, np.ndarray]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<Q", len(samples)))
        f.write(struct.pack("<I", len(fields)))
        for name in fields:
            _write_str(f, name)
        for sample in samples:
            for name in fields:
                _write_blob(f, sample[name])


def iter_dataset(path) -> Iterator[dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != DATASET_MAGIC:
            raise FormatError(f"{path}: not a dataset file (magic {magic!r})")
        (version,) = _unpack(f, "<I")
        if version != DATASET_VERSION:
            raise FormatError(f"{path}: unsupported dataset version {version}")
        (count,) = _unpack(f, "<Q")
        (nfields,) = _unpack(f, "<I")
        fields = [_read_str(f) for _ in range(nfields)]
        for _ in range(count):
            yield {name: _read_blob(f) for name in fields}
