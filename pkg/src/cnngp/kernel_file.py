"""Bit-exact kernel persistence.

Layout (little-endian throughout)::

    offset  size  field
    0       4     magic b"NNGK"
    4       4     format version (u32)
    8       4     payload kind (u32): 0 class_kernel, 1 cov_full, 2 cov_diag
    12      4     reserved, zero
    16      8     rows (u64): |X|, or test count for a cross block
    24      8     cols (u64): |X|, or train count for a cross block
    32      8     pixels d (u64), 1 for class kernels
    40      16    readout tag, ASCII, NUL padded
    56      8     architecture digest (u64)
    64      8     metadata length m (u64)
    72      m     metadata, UTF-8 JSON with sorted keys
    72 + m  ...   float64 payload

Payloads: class kernels are ``rows x cols`` row-major; ``cov_full`` is the
``(N d) x (N d)`` matrix in sample-major order; ``cov_diag`` is ``(N, N, d)``
row-major.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .data_model import ClassKernel, CovDiag, CovFull, flatten_cov, unflatten_cov

MAGIC = b"NNGK"
VERSION = 1
KINDS = {"class_kernel": 0, "cov_full": 1, "cov_diag": 2}
_KIND_NAMES = {v: k for k, v in KINDS.items()}
_HEADER = struct.Struct("<4sIII QQQ 16s QQ")


class KernelFileError(OSError):
    pass


class DigestMismatchError(ValueError):
    pass


@dataclass
class KernelFile:
    kind: str
    data: Union[ClassKernel, CovFull, CovDiag]
    digest: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def readout(self) -> str:
        return self.data.readout if isinstance(self.data, ClassKernel) else ""


def encode(obj, digest: int = 0, metadata: dict = None) -> bytes:
    metadata = dict(metadata or {})
    if isinstance(obj, ClassKernel):
        kind, payload = "class_kernel", obj.matrix
        rows, cols = obj.matrix.shape
        d, tag = 1, obj.readout
    elif isinstance(obj, CovFull):
        kind, payload = "cov_full", flatten_cov(obj)
        rows = cols = obj.n_samples
        d, tag = obj.n_pixels, ""
        metadata.update(spatial_shape=list(obj.spatial_shape), layer=obj.layer)
    elif isinstance(obj, CovDiag):
        kind, payload = "cov_diag", obj.values
        rows = cols = obj.n_samples
        d, tag = obj.n_pixels, ""
        metadata.update(spatial_shape=list(obj.spatial_shape), layer=obj.layer)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    tag_bytes = tag.encode("ascii")
    if len(tag_bytes) > 16:
        raise ValueError(f"readout tag {tag!r} longer than 16 bytes")
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()
    header = _HEADER.pack(MAGIC, VERSION, KINDS[kind], 0, rows, cols, d,
                          tag_bytes.ljust(16, b"\0"), digest & (2**64 - 1), len(meta))
    body = np.ascontiguousarray(payload, dtype="<f8").tobytes()
    return header + meta + body


def decode(raw: bytes, expected_digest: int = None, force: bool = False) -> KernelFile:
    if len(raw) < _HEADER.size:
        raise KernelFileError("file shorter than the kernel header")
    magic, version, kind_id, _, rows, cols, d, tag, digest, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise KernelFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise KernelFileError(f"unsupported format version {version}")
    if kind_id not in _KIND_NAMES:
        raise KernelFileError(f"unknown payload kind {kind_id}")
    kind = _KIND_NAMES[kind_id]
    start = _HEADER.size + mlen
    if len(raw) < start:
        raise KernelFileError("truncated metadata")
    metadata = json.loads(raw[_HEADER.size:start].decode()) if mlen else {}
    n_values = rows * cols * (d * d if kind == "cov_full" else d)
    if len(raw) - start != 8 * n_values:
        raise KernelFileError(f"payload has {len(raw) - start} bytes, expected {8 * n_values}")
    if expected_digest is not None and digest != expected_digest and not force:
        raise DigestMismatchError(
            f"kernel was computed for architecture digest {digest:#018x}, "
            f"config has {expected_digest:#018x}")
    values = np.frombuffer(raw, dtype="<f8", offset=start).astype(np.float64)
    tag = tag.rstrip(b"\0").decode("ascii")
    if kind == "class_kernel":
        data = ClassKernel(values.reshape(rows, cols), tag)
    elif kind == "cov_full":
        shape = tuple(metadata.get("spatial_shape", [d]))
        data = unflatten_cov(values.reshape(rows * d, rows * d), shape, metadata.get("layer", 0))
    else:
        shape = tuple(metadata.get("spatial_shape", [d]))
        data = CovDiag(values.reshape((rows, rows) + shape), shape, metadata.get("layer", 0))
    return KernelFile(kind, data, digest, metadata)


def save_kernel(path, obj, digest: int = 0, metadata: dict = None) -> None:
    with open(path, "wb") as f:
        f.write(encode(obj, digest, metadata))


def load_kernel(path, expected_digest: int = None, force: bool = False) -> KernelFile:
    with open(path, "rb") as f:
        raw = f.read()
    return decode(raw, expected_digest, force)
