"""Named, ordered parameter collections and their wire format.

A ParamSet is the unit of federated exchange and of on-disk checkpoints.
The serialized form is an ordered list of records, each:

    u32 LE  name length in bytes
    ...     name, UTF-8
    u32 LE  number of dimensions
    u32 LE  each dimension
    f64 LE  row-major data, prod(dims) values

Round-trips are bit-exact; the byte stream carries no header so a reader
simply consumes records until end of input.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Dict, Iterable, Iterator, Optional, Tuple

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor


class ParamSet:
    """Ordered mapping of parameter names to tensors."""

    def __init__(self, items: Optional[Iterable[Tuple[str, Tensor]]] = None):
        self._items: Dict[str, Tensor] = {}
        if items is not None:
            for name, t in items:
                self.add(name, t)

    def add(self, name: str, t: Tensor) -> None:
        if name in self._items:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._items[name] = t

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def names(self) -> list:
        return list(self._items.keys())

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._items.items())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.zero_grad()

    def copy(self, requires_grad: Optional[bool] = None) -> "ParamSet":
        out = ParamSet()
        for name, t in self._items.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out.add(name, Tensor(t.data.copy(), requires_grad=rg))
        return out

    def assign_from(self, other: "ParamSet", names: Optional[Iterable[str]] = None) -> None:
        """Copy data from ``other`` into this set's tensors, in place."""
        wanted = set(names) if names is not None else None
        for name, src in other.items():
            if wanted is not None and name not in wanted:
                continue
            if name not in self._items:
                raise ContractError(f"cannot assign unknown parameter {name!r}")
            dst = self._items[name]
            if dst.shape != src.shape:
                raise DimensionError(
                    f"shape mismatch for {name!r}: {dst.shape} vs {src.shape}")
            dst.data[...] = src.data

    # -- wire format -------------------------------------------------------

    def to_bytes(self) -> bytes:
        chunks = []
        for name, t in self._items.items():
            nb = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(nb)))
            chunks.append(nb)
            shape = t.shape
            chunks.append(struct.pack("<I", len(shape)))
            for d in shape:
                chunks.append(struct.pack("<I", d))
            chunks.append(t.data.astype("<f8", copy=False).tobytes(order="C"))
        return b"".join(chunks)

    @staticmethod
    def from_bytes(blob: bytes) -> "ParamSet":
        out = ParamSet()
        off = 0
        n = len(blob)
        while off < n:
            if off + 4 > n:
                raise ContractError("truncated ParamSet record (name length)")
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
            off += 4 * ndim
            count = int(np.prod(shape)) if shape else 1
            nbytes = 8 * count
            if off + nbytes > n:
                raise ContractError(f"truncated ParamSet record for {name!r}")
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
            off += nbytes
            out.add(name, Tensor(data.copy()))
        return out

    @staticmethod
    def describe_bytes(blob: bytes) -> list:
        """Names and shapes of the records in a serialized ParamSet."""
        return [(name, t.shape) for name, t in ParamSet.from_bytes(blob).items()]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @staticmethod
    def load(path) -> "ParamSet":
        with open(path, "rb") as fh:
            return ParamSet.from_bytes(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()
