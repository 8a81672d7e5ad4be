"""Dense float32 image tensors and a counter-based random generator.

Tensors are plain ``numpy.ndarray`` objects of shape ``(C, H, W)`` and
dtype float32. The helpers here add the checks numpy does not do on its
own: no broadcasting between tensors, and no NaN/Inf in results.

Randomness comes from the Philox-4x64 counter generator (numpy's
``Philox`` bit generator keyed by the seed). A ``Rng`` is fully described
by ``(seed, position)`` where position counts raw 64-bit words consumed,
so a stream can be rebuilt anywhere on any platform. Gaussian draws use
Box-Muller on those words instead of numpy's ziggurat.
"""
from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

DTYPE = np.float32
_TWO_PI = 2.0 * np.pi
_U53 = 1.0 / 9007199254740992.0  # 2**-53

CTNS_MAGIC = b"CTNS"
CTNS_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    """Raised when a result contains NaN or Inf."""


class FormatError(ValueError):
    """Malformed or truncated file contents."""


def zeros(shape) -> np.ndarray:
    return np.zeros(tuple(shape), dtype=DTYPE)


def full(shape, value: float) -> np.ndarray:
    return np.full(tuple(shape), value, dtype=DTYPE)


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) tensor, got shape {arr.shape}")
    return check_finite(arr)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains NaN or Inf")
    return x


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_same_shape(a, b)
    return check_finite(a + b)


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_same_shape(a, b)
    return check_finite(a - b)


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_same_shape(a, b)
    return check_finite(a * b)


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return check_finite((a * DTYPE(s)).astype(DTYPE, copy=False))


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``alpha * x + y`` with a shape check."""
    check_same_shape(x, y)
    return check_finite(DTYPE(alpha) * x + y)


# -- random numbers ---------------------------------------------------------


def derive_seed(seed: int, label: str) -> int:
    """Child seed for a labelled sub-stream: 64 bits of blake2b(seed, label)."""
    h = hashlib.blake2b(f"{seed & 0xFFFFFFFFFFFFFFFF}/{label}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Single-owner Philox stream. Never share one between consumers; use
    :meth:`child` to split."""

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.Philox(key=self.seed)
        self.position = 0
        if position:
            self._bitgen.advance(position // 4)
            if position % 4:
                self._bitgen.random_raw(position % 4)
            self.position = int(position)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, position={self.position})"

    def child(self, label: str) -> "Rng":
        return Rng(derive_seed(self.seed, label))

    def raw(self, n: int) -> np.ndarray:
        out = self._bitgen.random_raw(int(n))
        self.position += int(n)
        return np.asarray(out, dtype=np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 uniforms in (0, 1]."""
        return ((self.raw(n) >> np.uint64(11)).astype(np.float64) + 1.0) * _U53

    def integers(self, low: int, high: int, n: int | None = None):
        """Uniform integers in ``[low, high]`` (inclusive)."""
        span = high - low + 1
        if span <= 0:
            raise ValueError(f"empty integer range [{low}, {high}]")
        u = self.uniform(1 if n is None else n)
        vals = low + np.minimum(np.floor(u * span).astype(np.int64), span - 1)
        return int(vals[0]) if n is None else vals

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by this stream
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def standard_normal(self, n: int) -> np.ndarray:
        """``n`` float64 N(0, 1) draws via Box-Muller."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(u[:m]))
        theta = _TWO_PI * u[m:]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]


def seeded_rng(seed: int) -> Rng:
    return Rng(seed)


def normal_sample(rng: Rng, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape)) if shape else 1
    z = rng.standard_normal(n).reshape(shape)
    return (mean + std * z).astype(DTYPE)


# -- CTNS raw tensor files --------------------------------------------------


def ctns_bytes(x: np.ndarray) -> bytes:
    x = as_tensor(x)
    header = CTNS_MAGIC + struct.pack("<4I", CTNS_VERSION, *x.shape)
    return header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def parse_ctns(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 20:
        raise FormatError(f"{source}: truncated CTNS header at byte offset {len(buf)}")
    if buf[:4] != CTNS_MAGIC:
        raise FormatError(f"{source}: bad CTNS magic at byte offset 0")
    version, c, h, w = struct.unpack_from("<4I", buf, 4)
    if version != CTNS_VERSION:
        raise FormatError(f"{source}: unsupported CTNS version {version} at byte offset 4")
    need = 20 + 4 * c * h * w
    if len(buf) < need:
        raise FormatError(f"{source}: truncated CTNS payload at byte offset {len(buf)} (need {need})")
    data = np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=20)
    return data.reshape(c, h, w).astype(DTYPE)


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_ctns(path, x: np.ndarray) -> None:
    atomic_write(path, ctns_bytes(x))


def load_ctns(path) -> np.ndarray:
    return parse_ctns(Path(path).read_bytes(), str(path))
