"""Named parameter storage, its binary container format, and Adam.

Container layout (all integers little-endian)::

    magic    8 bytes   b"DKIPARAM"
    version  u32       currently 1
    count    u32       number of entries
    entry*   name_len u32, name utf-8, ndim u32, shape u64 * ndim,
             payload float64 little-endian, row-major, prod(shape) values

Entries are written in sorted-name order, so identical stores produce
identical bytes.
"""

from __future__ import annotations

import io
import struct
from collections.abc import MutableMapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DKIPARAM"
FORMAT_VERSION = 1


class ParamStore(MutableMapping):
    """Mapping ``name -> float64 ndarray`` iterated in sorted-name order."""

    def __init__(self, params=None):
        self._data: dict[str, np.ndarray] = {}
        for k, v in (params or {}).items():
            self[k] = v

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"parameter {name!r} has non-finite entries")
        if name in self._data and self._data[name].shape != arr.shape:
            raise ValueError(f"parameter {name!r}: shape {arr.shape} != stored {self._data[name].shape}")
        self._data[name] = arr

    def __delitem__(self, name: str) -> None:
        del self._data[name]

    def __iter__(self):
        return iter(sorted(self._data))

    def __len__(self) -> int:
        return len(self._data)

    def names(self) -> list[str]:
        return sorted(self._data)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._data.items()})

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", FORMAT_VERSION, len(self)))
        for name in self:
            arr = self._data[name]
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamStore":
        if blob[:8] != MAGIC:
            raise ValueError("not a parameter container (bad magic header)")
        version, count = struct.unpack_from("<II", blob, 8)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported container version {version}")
        pos = 16
        store = cls()
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            store[name] = arr.astype(np.float64)
        if pos != len(blob):
            raise ValueError("trailing bytes after the last entry")
        return store

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_store(self) -> ParamStore:
        out = ParamStore({"step": [float(self.step)], "hyper": [self.lr, self.beta1, self.beta2, self.eps]})
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    @classmethod
    def from_store(cls, store: ParamStore) -> "AdamState":
        lr, b1, b2, eps = store["hyper"]
        st = cls(lr=lr, beta1=b1, beta2=b2, eps=eps, step=int(store["step"][0]))
        for k in store:
            if k.startswith("m/"):
                st.m[k[2:]] = store[k].copy()
                st.v[k[2:]] = store["v/" + k[2:]].copy()
        return st


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place to every parameter in ``grads``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
