"""Content-addressed caching of matrix exponentials.

Arguments are identified by a cryptographic digest of their raw bytes, so a
lookup costs one linear hashing pass over the nonzeros plus an O(1) table
probe.  The cache is an optimization only: any storage failure falls back to
direct computation with a warning, and results served from the cache are
bit-identical to freshly computed ones.

The optional directory backend stores one file per entry, named by the hex
digest of the full key, in a fixed little-endian layout:

    magic b"NGE1" | rows uint64 | cols uint64 | rows*cols complex128 (C order)

A store pointed at an existing directory serves hits for everything computed
in earlier processes, which gives restart capability for long optimizations.
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import prop_derivs

__all__ = ["CacheKey", "CacheStats", "ExpmCache", "matrix_digest", "cached_expm"]

_MAGIC = b"NGE1"
_MIN_DIGEST_BITS = 128


@dataclass(frozen=True)
class CacheKey:
    """Identity of one cached result: argument digest, function tag, scalars."""

    digest: bytes
    function_tag: str
    scalar_params: bytes

    def __post_init__(self):
        if len(self.digest) * 8 < _MIN_DIGEST_BITS:
            raise ValueError("digest must be at least 128 bits")

    def entry_name(self) -> str:
        h = hashlib.sha256()
        h.update(self.digest)
        h.update(self.function_tag.encode())
        h.update(self.scalar_params)
        return h.hexdigest()


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    puts: int = 0
    bytes_stored: int = 0

    @property
    def lookups(self) -> int:
        return self.hits + self.misses


def _matrix_message(m) -> bytes:
    if sp.issparse(m):
        coo = m.tocoo()
        parts = [
            np.ascontiguousarray(coo.row).tobytes(),
            np.ascontiguousarray(coo.col).tobytes(),
            np.ascontiguousarray(coo.data).tobytes(),
            np.asarray(coo.shape, dtype=np.int64).tobytes(),
        ]
        return b"".join(parts)
    arr = np.ascontiguousarray(m)
    return np.asarray(arr.shape, dtype=np.int64).tobytes() + arr.tobytes()


def matrix_digest(m, tag: str, scalars: bytes = b"", algorithm: str = "sha256") -> CacheKey:
    """Digest a full or sparse matrix into a cache key.

    Full matrices hash their raw value bytes plus dimensions as one message;
    sparse matrices hash index, value and dimension arrays concatenated.  The
    key binds the representation: the same mathematical matrix held sparse
    and full hashes differently, so callers should canonicalize first.
    """
    h = hashlib.new(algorithm)
    h.update(_matrix_message(m))
    return CacheKey(digest=h.digest(), function_tag=tag, scalar_params=bytes(scalars))


class ExpmCache:
    """In-memory store for matrix functions, optionally backed by a directory.

    Parameters
    ----------
    threshold : matrices with dimension below this bypass the cache entirely
        (caching only pays off for large arguments; 512 is the documented
        break-even on 2015-era solid state disks and is configuration, not a
        re-validated claim).
    directory : optional path for the file backend; created if missing.
    algorithm : hashlib algorithm name, any >=128-bit digest.
    paranoid : verify argument bytes element-by-element on memory hits and
        treat a mismatch (a hash collision) as a miss.
    """

    def __init__(
        self,
        threshold: int = 512,
        directory: str | os.PathLike | None = None,
        algorithm: str = "sha256",
        paranoid: bool = False,
    ):
        self.threshold = int(threshold)
        self.directory = os.fspath(directory) if directory is not None else None
        self.algorithm = algorithm
        self.paranoid = bool(paranoid)
        self.stats = CacheStats()
        self._store: dict[CacheKey, np.ndarray] = {}
        self._args: dict[CacheKey, bytes] = {}
        self._lock = threading.Lock()
        if self.directory is not None:
            os.makedirs(self.directory, exist_ok=True)

    def __len__(self) -> int:
        return len(self._store)

    def clear(self) -> None:
        with self._lock:
            self._store.clear()
            self._args.clear()

    def get(self, key: CacheKey, arg_bytes: bytes | None = None) -> np.ndarray | None:
        with self._lock:
            value = self._store.get(key)
            if value is not None and self.paranoid and arg_bytes is not None:
                if self._args.get(key) != arg_bytes:
                    value = None  # collision: fall through to recompute
        if value is None and self.directory is not None:
            value = self._load_file(key)
            if value is not None:
                with self._lock:
                    self._store[key] = value
        with self._lock:
            if value is None:
                self.stats.misses += 1
            else:
                self.stats.hits += 1
        return None if value is None else value.copy()

    def put(self, key: CacheKey, value: np.ndarray, arg_bytes: bytes | None = None) -> None:
        value = np.ascontiguousarray(value)
        with self._lock:
            self._store[key] = value
            if self.paranoid and arg_bytes is not None:
                self._args[key] = arg_bytes
            self.stats.puts += 1
            self.stats.bytes_stored += value.nbytes
        if self.directory is not None:
            try:
                self._save_file(key, value)
            except OSError as exc:
                warnings.warn(f"cache write failed ({exc}); continuing without persistence")

    def _path(self, key: CacheKey) -> str:
        assert self.directory is not None
        return os.path.join(self.directory, key.entry_name() + ".mat")

    def _save_file(self, key: CacheKey, value: np.ndarray) -> None:
        data = np.ascontiguousarray(value, dtype="<c16")
        rows, cols = data.shape
        payload = _MAGIC + struct.pack("<QQ", rows, cols) + data.tobytes()
        tmp = self._path(key) + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, self._path(key))

    def _load_file(self, key: CacheKey) -> np.ndarray | None:
        path = self._path(key)
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except FileNotFoundError:
            return None
        except OSError as exc:
            warnings.warn(f"cache read failed ({exc}); recomputing")
            return None
        header = len(_MAGIC) + 16
        if len(blob) < header or blob[: len(_MAGIC)] != _MAGIC:
            warnings.warn(f"corrupt cache entry {path}; recomputing")
            return None
        rows, cols = struct.unpack("<QQ", blob[len(_MAGIC) : header])
        expected = header + rows * cols * 16
        if len(blob) != expected:
            warnings.warn(f"corrupt cache entry {path}; recomputing")
            return None
        flat = np.frombuffer(blob[header:], dtype="<c16")
        return flat.reshape(rows, cols).astype(np.complex128, copy=False)


def cached_expm(store: ExpmCache | None, h: np.ndarray, dt: float) -> np.ndarray:
    """exp(H*dt) through the cache; dt enters the key as a scalar parameter.

    Below the store's dimension threshold (or with no store at all) the call
    goes straight to the exponential and touches no statistics.
    """
    if sp.issparse(h):
        h = h.toarray()
    h = np.ascontiguousarray(h, dtype=np.complex128)
    if store is None or h.shape[0] < store.threshold:
        return prop_derivs.expm(h * dt)
    arg_bytes = _matrix_message(h) if store.paranoid else None
    key = matrix_digest(h, "expm", struct.pack("<d", float(dt)), store.algorithm)
    value = store.get(key, arg_bytes)
    if value is not None:
        return value
    value = prop_derivs.expm(h * dt)
    store.put(key, value, arg_bytes)
    return value
