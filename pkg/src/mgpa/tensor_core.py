"""Array plumbing shared by every module: contract checks, seeded RNG streams,
reparameterized Gaussian draws and the MGPT binary tensor format.

Tensors are plain float64 numpy arrays (row-major, explicit shape).
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

MGPT_MAGIC = b"MGPT"
MGPT_VERSION = 1

PathLike = Union[str, os.PathLike]


class ContractError(ValueError):
    """Raised when an operation is called with arguments violating its contract."""


class TensorFormatError(ValueError):
    """Raised when an MGPT file is malformed. ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def require(condition: bool, message: str) -> None:
    if not condition:
        raise ContractError(message)


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array, rejecting non-finite values."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


class SeededRng:
    """Deterministic random stream built on the Philox4x64 counter-based generator.

    A stream is identified by its seed plus an optional tuple of integer keys;
    :meth:`substream` derives an independent child stream from ``(seed, *keys, key)``
    through numpy's ``SeedSequence`` hashing, so parallel or resumed sections never
    share state.
    """

    algorithm = "philox4x64-10 via numpy.random.SeedSequence"

    def __init__(self, seed: int, keys: tuple[int, ...] = ()):
        require(int(seed) >= 0, "seed must be a non-negative integer")
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        entropy = [self.seed, *self.keys]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def substream(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, self.keys + tuple(keys))

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def gaussian_reparam_sample(mean, std, rng: SeededRng) -> np.ndarray:
    """Draw ``mean + std * eps`` with ``eps ~ N(0, I)`` of the same shape."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    require(mean.shape == std.shape, f"shape mismatch: mean {mean.shape} vs std {std.shape}")
    require(bool(np.all(std >= 0)), "std must be elementwise non-negative")
    eps = rng.standard_normal(mean.shape)
    return mean + std * eps


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    require(a.ndim == 2 and b.ndim == 2, "matmul expects 2-D operands")
    require(a.shape[1] == b.shape[0], f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def write_tensor(path_or_file: Union[PathLike, BinaryIO], arr) -> None:
    """Write ``arr`` in MGPT format: magic, u32 version, u32 ndim, u64 dims, f64 LE payload."""
    arr = np.require(np.asarray(arr, dtype="<f8"), requirements="C")
    header = MGPT_MAGIC + struct.pack("<II", MGPT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    if hasattr(path_or_file, "write"):
        path_or_file.write(header)
        path_or_file.write(arr.tobytes(order="C"))
        return
    with open(path_or_file, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_tensor(path_or_file: Union[PathLike, BinaryIO]) -> np.ndarray:
    if hasattr(path_or_file, "read"):
        raw = path_or_file.read()
    else:
        raw = Path(path_or_file).read_bytes()
    return parse_tensor(raw)


def parse_tensor(raw: bytes) -> np.ndarray:
    if len(raw) < 4 or raw[:4] != MGPT_MAGIC:
        raise TensorFormatError("bad magic bytes, expected b'MGPT'", 0)
    if len(raw) < 12:
        raise TensorFormatError("truncated header", len(raw))
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != MGPT_VERSION:
        raise TensorFormatError(f"unsupported version {version}", 4)
    dims_end = 12 + 8 * ndim
    if len(raw) < dims_end:
        raise TensorFormatError("truncated dimension list", len(raw))
    shape = struct.unpack_from(f"<{ndim}Q", raw, 12)
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    expected = dims_end + 8 * count
    if len(raw) != expected:
        offset = min(len(raw), expected)
        raise TensorFormatError(
            f"payload size mismatch: expected {expected} bytes total, found {len(raw)}", offset
        )
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=dims_end)
    return data.astype(np.float64).reshape(shape)
