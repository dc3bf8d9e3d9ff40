"""Named trainable matrices, their binary file format, and gradient checking."""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .autodiff import Node, NumericError, Tape, as_matrix, backward

MAGIC = b"MDGP"
VERSION = 1


class ParamFormatError(ValueError):
    pass


class ParamStore:
    """Ordered mapping name -> float64 matrix.

    Read-shared during evaluation; a training run owns it exclusively.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}

    def __contains__(self, name):
        return name in self._values

    def __getitem__(self, name) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name, value):
        self._values[name] = as_matrix(value, name).copy()

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def n_entries(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self._values.items():
            out._values[k] = v.copy()
        return out

    def init_uniform(self, name: str, rows: int, cols: int, rng: np.random.Generator,
                     fan_in: int | None = None):
        bound = 1.0 / np.sqrt(fan_in if fan_in else rows)
        self._values[name] = rng.uniform(-bound, bound, size=(rows, cols))

    def init_zeros(self, name: str, rows: int, cols: int):
        self._values[name] = np.zeros((rows, cols))

    def bind(self, tape: Tape) -> dict[str, Node]:
        """Place every parameter on ``tape`` as a leaf; returns name -> node."""
        return {k: tape.leaf(v, k) for k, v in self._values.items()}

    def equals(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[k], other[k]) for k in self._values)

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", VERSION)]
        for name, v in self._values.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<II", *v.shape))
            parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        if data[:4] != MAGIC:
            raise ParamFormatError("bad magic, not a parameter file")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != VERSION:
            raise ParamFormatError(f"unsupported version {version}")
        pos = 8
        out = cls()
        try:
            while pos < len(data):
                (n,) = struct.unpack_from("<I", data, pos)
                pos += 4
                name = data[pos:pos + n].decode("utf-8")
                pos += n
                rows, cols = struct.unpack_from("<II", data, pos)
                pos += 8
                nbytes = 8 * rows * cols
                if pos + nbytes > len(data):
                    raise ParamFormatError(f"truncated payload for {name!r}")
                arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos)
                out._values[name] = arr.reshape(rows, cols).astype(np.float64)
                pos += nbytes
        except struct.error as exc:
            raise ParamFormatError(f"truncated record at byte {pos}") from exc
        return out

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())


LossBuilder = Callable[[Tape, dict[str, Node]], Node]


def evaluate(f: LossBuilder, params: ParamStore) -> float:
    tape = Tape()
    loss = f(tape, params.bind(tape))
    value = loss.item()
    tape.release()
    if not np.isfinite(value):
        raise NumericError("non-finite loss during gradient check")
    return value


def analytic_grads(f: LossBuilder, params: ParamStore) -> dict[str, np.ndarray]:
    tape = Tape()
    nodes = params.bind(tape)
    loss = f(tape, nodes)
    backward(tape, loss)
    grads = {k: n.grad.copy() for k, n in nodes.items()}
    tape.release()
    return grads


def grad_check(f: LossBuilder, params: ParamStore, h: float = 1e-5) -> float:
    """Max over all entries of |analytic - central| / max(1, |central|)."""
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    grads = analytic_grads(f, params)
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite analytic gradient")
    probe = params.copy()
    worst = 0.0
    for name in probe.names():
        arr = probe[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = evaluate(f, probe)
            arr[idx] = orig - h
            down = evaluate(f, probe)
            arr[idx] = orig
            numeric = (up - down) / (2 * h)
            err = abs(grads[name][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
